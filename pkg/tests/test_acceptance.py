"""Acceptance suite: one printed pass/fail line per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also collected in the terminal summary.  The long-running
learning smoke test is marked ``long`` and is skipped by the default gate.
"""

import time

import numpy as np
import pytest

from rbcmarl import config as cf
from rbcmarl import gradcore as gc
from rbcmarl import lab_cli
from rbcmarl import marl_env as me
from rbcmarl import policy_nets as pn
from rbcmarl import ppo_trainer as pt
from rbcmarl import verify as vf
from rbcmarl.gradcore import Tensor


def test_group_invariant_networks_ignore_the_flip(acceptance):
    ok = True
    for kind in ("GI_NN", "GI_CNN"):
        t0 = time.perf_counter()
        gaps = vf.invariance_gaps(kind, 1000, seed=11)
        worst = gaps.max()
        ok &= acceptance(
            f"{kind} output invariance",
            worst <= 1e-9,
            f"max |phi(s) - phi(flip s)| {worst:.2e} <= 1e-9 over 1000 pairs ({time.perf_counter() - t0:.0f}s)",
        )
    frac = float(np.mean(vf.invariance_gaps("FC", 1000, seed=12) > 1e-3))
    ok &= acceptance("FC breaks the flip symmetry", frac >= 0.95, f"{100 * frac:.1f}% of 1000 pairs exceed 1e-3 (need >= 95%)")
    assert ok


def test_parameter_counts(acceptance):
    fc = pn.parameter_count(pn.PolicyNet(pn.NetworkSpec(trunk_kind="FC"), 0))["trunk_weights"]
    cnn = pn.PolicyNet(pn.NetworkSpec(trunk_kind="GI_CNN"), 0)
    report = pn.format_count_report(cnn, target=420_864)
    print(report)
    ok = acceptance("FC trunk weight count", fc == 655_360, f"{fc:,d} == 655,360")
    cnn_w = pn.parameter_count(cnn)["trunk_weights"]
    ok &= acceptance("GI-CNN count report", "target 420,864" in report, f"trunk weights {cnn_w:,d}, target 420,864 printed with per-layer breakdown")
    assert ok


def test_action_pipeline_is_mean_free_and_bounded(acceptance):
    rng = np.random.default_rng(2024)
    cfg = me.EnvConfig()
    worst_mean, worst_abs = 0.0, 0.0
    for _ in range(100):
        for raw in rng.uniform(-1.0, 1.0, size=(10_000, cfg.n_segments)):
            worst_mean = max(worst_mean, abs(me.mean_free(raw).sum()) / cfg.n_segments)
            worst_abs = max(worst_abs, np.abs(me.process_actions(raw, cfg)).max())
    ok = acceptance("pre-clamp mean of centred actions", worst_mean <= 1e-12, f"max |sum a|/N {worst_mean:.2e} <= 1e-12 over 1e6 vectors")
    ok &= acceptance("clamped actions stay in range", worst_abs <= 0.75, f"max |a| {worst_abs} <= 0.75")
    assert ok


def test_clip_algebra_and_gradient_gating(acceptance):
    net = pn.PolicyNet(pn.NetworkSpec(trunk_kind="FC", hidden_width=16), 0)
    rng = np.random.default_rng(5)
    views = rng.normal(size=(12, 3, 8, 32))
    _, samples, logp = pn.act(net.evaluate(views), "stochastic", rng)
    adv = rng.normal(size=12)
    centre = pt.ppo_loss(pt.Batch(views, samples, logp, adv, np.zeros(12)), net, pt.PPOHyper(normalize_advantages=False)).item()
    ex1 = centre == -adv.mean()
    ex2 = pt.clipped_surrogate(Tensor([1.5]), [1.0], 0.2).item() == 1.2
    ex3 = pt.clipped_surrogate(Tensor([0.5]), [-1.0], 0.2).item() == -0.8
    ok = acceptance("clip worked examples", ex1 and ex2 and ex3, f"ratio 1 -> -mean(A) {ex1}, (1.5, +1) -> 1.2 {ex2}, (0.5, -1) -> -0.8 {ex3}")

    ratios = np.array([0.5, 0.7, 0.9, 1.1, 1.3, 1.6, 0.5, 0.7, 0.9, 1.1, 1.3, 1.6])
    advs = np.array([1.0] * 6 + [-1.0] * 6) * rng.uniform(0.2, 2.0, size=12)
    r = Tensor(ratios, requires_grad=True)
    gc.backward(gc.sum(pt.clipped_surrogate(r, advs, 0.2)))
    gated = ((advs > 0) & (ratios > 1.2)) | ((advs < 0) & (ratios < 0.8))
    exact = np.all(r.grad[gated] == 0.0) and np.all(r.grad[~gated] == advs[~gated])
    ok &= acceptance("gradient gating outside the clip band", bool(exact), f"{gated.sum()} gated samples with zero gradient, {(~gated).sum()} pass-through")
    assert ok


def test_finite_difference_gradients(acceptance):
    t0 = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in vf.op_gradient_cases(rng).items():
            err = vf.check_op_gradient(fn, inputs, rng)
            if err > worst_op:
                worst_op, worst_name = err, name
    ok = acceptance("op gradients", worst_op <= 1e-4, f"worst relative error {worst_op:.2e} ({worst_name}) <= 1e-4 over 100 seeds")
    for kind in pn.TRUNK_KINDS:
        worst = max(vf.check_trunk_gradient(kind, seed) for seed in range(100))
        ok &= acceptance(f"{kind} trunk gradients", worst <= 1e-4, f"worst relative error {worst:.2e} <= 1e-4 over 100 seeds")
    print(f"gradient checks took {time.perf_counter() - t0:.0f}s")
    assert ok


def test_solver_physics(acceptance):
    drift = vf.conduction_drift(n_steps=10_000)
    ok = acceptance("conduction fixed point", drift <= 1e-8, f"drift {drift:.2e} <= 1e-8 after 1e4 steps")
    nu = vf.subcritical_nusselt()
    ok &= acceptance("Nusselt at Ra=1e3", abs(nu - 1) <= 0.01, f"Nu {nu:.6f} within 1% of 1")
    ra_c = vf.critical_rayleigh()
    dev = abs(ra_c - 1708.0) / 1708.0
    ok &= acceptance("critical Rayleigh number", dev <= 0.05, f"bisected Ra_c {ra_c:.1f}, {100 * dev:.2f}% from 1708 (<= 5%)")
    mirror = max(vf.mirror_error(seed=s) for s in range(3))
    ok &= acceptance("mirror equivariance of the step", mirror <= 1e-8, f"max error {mirror:.2e} <= 1e-8")
    shift = max(vf.translation_error(seed=s, k=k) for s, k in ((0, 1), (1, 3), (2, 7)))
    ok &= acceptance("segment-translation equivariance", shift <= 1e-10, f"max error {shift:.2e} <= 1e-10")
    assert ok


def test_mirror_symmetric_state_couples_agent_pairs(acceptance):
    ok = True
    for kind in ("GI_NN", "GI_CNN"):
        gap = max(vf.mirror_pair_gap(kind, seed=s) for s in range(3))
        ok &= acceptance(f"{kind} mirrored agents agree", gap <= 1e-8, f"max |mu_i - mu_(N-1-i)| {gap:.2e} <= 1e-8")
        pe_gap = vf.mirror_pair_gap(kind, pe=True)
        ok &= acceptance(f"{kind} with positional encoding", pe_gap > 1e-3, f"max |mu_i - mu_(N-1-i)| {pe_gap:.2e} > 1e-3")
    assert ok


def test_training_and_evaluation_are_deterministic(acceptance, tmp_path):
    cfg = cf.desk_config(episodes=5)
    base = lab_cli.run_baseline(cfg)
    runs = [pt.train(cfg, 7, tmp_path / f"run_{k}", base.state, base.nu_base) for k in range(2)]
    logs = [(tmp_path / f"run_{k}" / "training.csv").read_bytes() for k in range(2)]
    ok = acceptance("repeat training runs", logs[0] == logs[1] and len(runs[0].rows) == 5, f"5-episode training CSVs bit-identical: {logs[0] == logs[1]}")

    net = pn.load_checkpoint(tmp_path / "run_0" / "final.ckpt")
    evals = [lab_cli.run_evaluation(cfg, net, base.state, base.nu_base, "deterministic", 0, tmp_path / f"eval_{k}").read_bytes() for k in range(2)]
    ok &= acceptance("repeat deterministic evaluation", evals[0] == evals[1], f"evaluation CSVs bit-identical: {evals[0] == evals[1]}")
    assert ok


@pytest.mark.long
def test_desk_scale_learning_smoke(acceptance, tmp_path):
    results = lab_cli.learning_smoke(tmp_path, echo=print)
    ok = True
    for r in results:
        ok &= acceptance(r.name, r.passed, r.detail)
    assert ok
