"""Self-checks behind ``rbcmarl verify``.

Each check returns a :class:`CheckResult`; the suites are plain lists so the
acceptance tests and the CLI run exactly the same code.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gradcore as gc
from . import marl_env as me
from . import policy_nets as pn
from . import rbc_solver as rs
from .gradcore import Tensor
from .rbc_solver import SolverConfig, WallProfile

CRITICAL_RA = 1708.0
COARSE = SolverConfig(nx=16, ny=21, dt=0.02)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def timed(fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.perf_counter()
    res = fn()
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# finite differences


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_gradient(f: Callable[[], float | np.ndarray], x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of ``f`` wrt ``x`` (modified in place and restored).

    ``f`` may return an array whose sum is the objective.  The two perturbed
    arrays are then subtracted before summing, so entries that do not depend
    on the perturbed coordinate cancel exactly instead of adding rounding
    noise.  With ``coords`` only those flat indices are perturbed.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = np.sum(np.asarray(fp) - np.asarray(fm)) / (2 * h)
    return grad


def _away_from(rng, shape, points, gap=0.05):
    """Normal samples kept at least ``gap`` away from each kink location."""
    x = rng.normal(size=shape)
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + np.where(x[close] >= p, gap, -gap) * 2
    return x


def op_gradient_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    """One randomly shaped case per differentiable op: (function of tensors, inputs)."""
    c, h, w = (int(n) for n in rng.integers(1, [5, 9, 9], endpoint=True))
    m, k, n = (int(v) for v in rng.integers(1, 7, size=3))
    shape = (c, h, w)
    pair_a = rng.normal(size=shape)
    pair_b = pair_a + _away_from(rng, shape, [0.0])  # no ties for min
    signs = rng.choice([-1.0, 1.0], size=c)
    return {
        "matmul": (gc.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]),
        "conv2d_zero_pad": (gc.conv2d_zero_pad, [rng.normal(size=shape), rng.normal(size=(2, c, 3, 3))]),
        "reverse_width": (lambda x: gc.reverse_width(x, signs), [rng.normal(size=shape)]),
        "add": (gc.add, [rng.normal(size=shape), rng.normal(size=shape)]),
        "sub": (gc.sub, [rng.normal(size=shape), rng.normal(size=shape)]),
        "mul": (gc.mul, [rng.normal(size=shape), rng.normal(size=shape)]),
        "scale": (lambda x: gc.scale(x, 1.7), [rng.normal(size=shape)]),
        "neg": (gc.neg, [rng.normal(size=shape)]),
        "add_bias": (gc.add_bias, [rng.normal(size=shape), rng.normal(size=w)]),
        "tanh": (gc.tanh, [rng.normal(size=shape)]),
        "softplus": (gc.softplus, [3 * rng.normal(size=shape)]),
        "exp": (gc.exp, [rng.normal(size=shape)]),
        "log": (gc.log, [rng.uniform(0.2, 3.0, size=shape)]),
        "square": (gc.square, [rng.normal(size=shape)]),
        "sum": (lambda x: gc.sum(x, axis=1), [rng.normal(size=shape)]),
        "mean": (lambda x: gc.mean(x, axis=(1, 2)), [rng.normal(size=shape)]),
        "min_pairwise": (gc.min_pairwise, [pair_a, pair_b]),
        "clip_by_value": (lambda x: gc.clip_by_value(x, -0.5, 0.7), [_away_from(rng, shape, [-0.5, 0.7])]),
        "reshape": (lambda x: gc.reshape(x, (h, c * w)), [rng.normal(size=shape)]),
        "broadcast_to": (lambda x: gc.broadcast_to(x, (c, h, w)), [rng.normal(size=(1, h, w))]),
        "roll": (lambda x: gc.roll(x, 2, axis=-1), [rng.normal(size=shape)]),
        "concat": (lambda a, b: gc.concat([a, b], axis=0), [rng.normal(size=shape), rng.normal(size=shape)]),
        "gaussian_logpdf": (gc.gaussian_logpdf, [rng.normal(size=shape), rng.normal(size=shape), 0.5 * rng.normal(size=shape)]),
    }


def check_op_gradient(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error of d(sum(weights * fn(inputs)))/d(input) over all inputs."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weights = rng.normal(size=out.shape)
    gc.backward(gc.sum(gc.mul(out, Tensor(weights))))

    def value():
        return fn(*[Tensor(t.values) for t in leaves]).values * weights

    return max(relative_error(t.grad, numeric_gradient(value, t.values)) for t in leaves)


def check_trunk_gradient(kind: str, seed: int, n_coords: int = 6, flip_mode: str = "physical") -> float:
    """Worst relative error of d(loss)/d(param) over sampled coordinates of every parameter."""
    rng = np.random.default_rng(seed)
    spec = pn.NetworkSpec(trunk_kind=kind, hidden_width=6, conv_kernels=3, cnn_hidden=4, flip_mode=flip_mode, obs_shape=(3, 8, 6))
    net = pn.PolicyNet(spec, seed).randomize(rng, bias_scale=0.3)
    obs = rng.normal(size=(2, 3, 8, 6))
    target = rng.normal(size=2)
    samples = rng.normal(size=2)

    def loss_tensor():
        mean, log_std, value = net.forward(obs)
        lp = gc.gaussian_logpdf(Tensor(samples), mean, log_std)
        return gc.add(gc.mean(lp), gc.mean(gc.square(gc.sub(value, Tensor(target)))))

    net.zero_grad()
    gc.backward(loss_tensor())
    worst = 0.0
    for p in net.parameters():
        coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)
        numeric = numeric_gradient(lambda: loss_tensor().item(), p.values, coords=coords)
        worst = max(worst, relative_error(p.grad.reshape(-1)[coords], numeric.reshape(-1)[coords]))
    return worst


# ---------------------------------------------------------------------------
# solver physics


def conduction_drift(cfg: SolverConfig = SolverConfig(), n_steps: int = 10_000) -> float:
    s0 = rs.init_conduction(cfg)
    s = s0
    profile = WallProfile(np.zeros(10))
    for _ in range(n_steps):
        s = rs.step(s, profile, cfg)
    return s.max_abs_diff(s0)


def subcritical_nusselt(duration: float = 60.0) -> float:
    cfg = SolverConfig(rayleigh=1.0e3, dt=0.01)
    state = rs.init_perturbed(cfg, 0, 0.1)
    state = rs.advance(state, WallProfile(np.zeros(10)), duration, cfg)
    return rs.nusselt_global(state, cfg)


def growth_rate(rayleigh: float, base: SolverConfig = COARSE, t1: float = 40.0, t2: float = 80.0) -> float:
    """Kinetic-energy e-folding rate / 2 of a tiny perturbation measured over [t1, t2]."""
    cfg = SolverConfig(**{**base.__dict__, "rayleigh": rayleigh})
    zero = WallProfile(np.zeros(1))  # uniform wall; one segment fits any grid
    state = rs.advance(rs.init_perturbed(cfg, 0, 1e-6), zero, t1, cfg)
    e1 = rs.kinetic_energy(state, cfg)
    state = rs.advance(state, zero, t2 - t1, cfg)
    e2 = rs.kinetic_energy(state, cfg)
    return math.log(e2 / e1) / (2.0 * (t2 - t1))


def critical_rayleigh(lo: float = 1000.0, hi: float = 5000.0, rel_width: float = 0.005) -> float:
    """Bisect (in log Ra) the sign change of the perturbation growth rate."""
    if growth_rate(lo) >= 0 or growth_rate(hi) <= 0:
        raise RuntimeError(f"growth rate does not change sign on [{lo}, {hi}]")
    while hi / lo - 1.0 > rel_width:
        mid = math.sqrt(lo * hi)
        if growth_rate(mid) > 0:
            hi = mid
        else:
            lo = mid
    return math.sqrt(lo * hi)


def mirror_error(cfg: SolverConfig = SolverConfig(), seed: int = 0, n_steps: int = 20) -> float:
    rng = np.random.default_rng(seed)
    profile = WallProfile(me.process_actions(rng.uniform(-1, 1, 10), me.EnvConfig()))
    a = rs.random_state(cfg, seed)
    b = rs.mirror(a)
    pb = rs.mirror_profile(profile)
    for _ in range(n_steps):
        a = rs.step(a, profile, cfg)
        b = rs.step(b, pb, cfg)
    return rs.mirror(a).max_abs_diff(b)


def translation_error(cfg: SolverConfig = SolverConfig(), seed: int = 0, n_steps: int = 20, k: int = 3) -> float:
    rng = np.random.default_rng(seed + 1)
    profile = WallProfile(me.process_actions(rng.uniform(-1, 1, 10), me.EnvConfig()))
    a = rs.random_state(cfg, seed)
    b = rs.translate(a, k, cfg)
    pb = rs.translate_profile(profile, k)
    for _ in range(n_steps):
        a = rs.step(a, profile, cfg)
        b = rs.step(b, pb, cfg)
    return rs.translate(a, k, cfg).max_abs_diff(b)


# ---------------------------------------------------------------------------
# networks and coupling


def invariance_gaps(kind: str, n_pairs: int, seed: int = 0, spec_kw: dict | None = None) -> np.ndarray:
    """|Phi(s) - Phi(flip s)| (max over mean and value) for fresh random (params, obs) pairs."""
    rng = np.random.default_rng(seed)
    spec = pn.NetworkSpec(trunk_kind=kind, **(spec_kw or {}))
    net = pn.PolicyNet(spec, seed)
    gaps = np.empty(n_pairs)
    for i in range(n_pairs):
        net.randomize(rng)
        obs = rng.normal(size=(1,) + spec.obs_shape)
        a = net.evaluate(obs)
        b = net.evaluate(pn.flip_observation(obs, spec.flip_mode))
        gaps[i] = max(np.max(np.abs(a.mean - b.mean)), np.max(np.abs(a.value - b.value)), np.max(np.abs(a.std - b.std)))
    return gaps


def symmetric_snapshot(cfg: SolverConfig = SolverConfig(), seed: int = 0) -> rs.FlowState:
    s = rs.random_state(cfg, seed)
    return s.combine(0.5, rs.mirror(s), 0.5)


def mirror_pair_gap(
    kind: str,
    flip_mode: str = "physical",
    pe: bool = False,
    seed: int = 0,
    cfg: SolverConfig = SolverConfig(),
    spec_kw: dict | None = None,
) -> float:
    """max_i |mu_i - mu_{N-1-i}| of the action means on a mirror-symmetric state."""
    env_cfg = me.EnvConfig(pe_enabled=pe)
    state = symmetric_snapshot(cfg, seed)
    obs = rs.probe_grid(state, cfg, env_cfg.probe_columns, env_cfg.n_segments)
    views = me.policy_views(obs, env_cfg, cfg.domain_width)
    net = pn.PolicyNet(pn.NetworkSpec(trunk_kind=kind, flip_mode=flip_mode, **(spec_kw or {})), seed)
    net.randomize(np.random.default_rng(seed))
    mu = net.evaluate(views).mean
    return float(np.max(np.abs(mu - mu[::-1])))


# ---------------------------------------------------------------------------
# suites


def physics_suite(quick: bool = False) -> list[Callable[[], CheckResult]]:
    def conduction():
        n = 1000 if quick else 10_000
        d = conduction_drift(n_steps=n)
        return CheckResult(f"conduction fixed point ({n} steps)", d <= 1e-8, d, 1e-8, f"drift {d:.2e} <= 1e-8")

    def subcritical():
        nu = subcritical_nusselt()
        err = abs(nu - 1.0)
        return CheckResult("subcritical Ra=1e3 Nusselt", err <= 0.01, err, 0.01, f"Nu {nu:.6f}, |Nu-1| {err:.2e} <= 0.01")

    def onset():
        ra = critical_rayleigh()
        dev = abs(ra - CRITICAL_RA) / CRITICAL_RA
        return CheckResult(
            "critical Rayleigh bisection", dev <= 0.05, dev, 0.05, f"Ra_c {ra:.1f}, deviation from 1708 {100 * dev:.2f}% <= 5%"
        )

    def mirror():
        e = mirror_error()
        return CheckResult("mirror equivariance of step", e <= 1e-8, e, 1e-8, f"max error {e:.2e} <= 1e-8")

    def translation():
        e = translation_error()
        return CheckResult("segment-translation equivariance", e <= 1e-10, e, 1e-10, f"max error {e:.2e} <= 1e-10")

    checks = [conduction, mirror, translation, subcritical]
    return checks if quick else checks + [onset]


def network_suite(flip_mode: str = "physical", n_pairs: int = 200) -> list[Callable[[], CheckResult]]:
    small = {"hidden_width": 64, "conv_kernels": 16, "cnn_hidden": 16, "flip_mode": flip_mode}

    def invariant(kind):
        def run():
            g = invariance_gaps(kind, n_pairs, spec_kw=small).max()
            return CheckResult(f"{kind} flip invariance", g <= 1e-9, g, 1e-9, f"max gap {g:.2e} <= 1e-9")

        return run

    def fc_negative():
        g = invariance_gaps("FC", n_pairs, spec_kw=small)
        frac = float(np.mean(g > 1e-3))
        return CheckResult("FC not flip invariant", frac >= 0.95, frac, 0.95, f"{100 * frac:.1f}% of pairs exceed 1e-3")

    def coupling(kind):
        def run():
            g = mirror_pair_gap(kind, flip_mode, spec_kw={"conv_kernels": 64, "cnn_hidden": 64})
            return CheckResult(f"{kind} mirror coupling", g <= 1e-8, g, 1e-8, f"max |mu_i - mu_(N-1-i)| {g:.2e} <= 1e-8")

        return run

    def gradients():
        worst = max(check_trunk_gradient(k, s) for k in pn.TRUNK_KINDS for s in range(5))
        for s in range(20):
            rng = np.random.default_rng(s)
            for fn, inputs in op_gradient_cases(rng).values():
                worst = max(worst, check_op_gradient(fn, inputs, rng))
        return CheckResult("op and trunk gradient checks", worst <= 1e-4, worst, 1e-4, f"worst relative error {worst:.2e} <= 1e-4")

    return [invariant("GI_NN"), invariant("GI_CNN"), fc_negative, coupling("GI_NN"), coupling("GI_CNN"), gradients]


def run_suite(checks, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for check in checks:
        res = timed(check)
        results.append(res)
        if echo:
            echo(res.line())
    return results
