"""2D Rayleigh-Benard convection in a periodic channel.

Free-fall units with height H = 1: the flow obeys

    du/dt + (u.grad)u = -grad p + sqrt(Pr/Ra) lap u + T e_y,   div u = 0,
    dT/dt + u.grad T  = lap T / sqrt(Ra Pr),

no-slip walls at y = 0 (heated, segment-wise actuated) and y = 1 (cooled),
periodic in x.  Pressure is eliminated: each nonzero Fourier mode carries a
streamfunction psi = y(1-y) q(y) whose fourth-order vorticity equation is
collocated on Chebyshev points, so psi and dpsi/dy vanish at both walls by
construction.  The x-mean velocity has its own diffusion equation.  Time
stepping is Crank-Nicolson for diffusion with Heun (explicit RK2) for
advection and buoyancy; products are dealiased with the 2/3 rule.

Fields live on an ``(ny, nx)`` grid, row 0 at the bottom wall.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"RBCSNAP\x00"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sIII4d")

BLOWUP_THRESHOLD = 1e3
PROBE_ROWS = 8


class ConfigurationError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class BlowUpError(RuntimeError):
    def __init__(self, time: float, max_abs: float):
        super().__init__(f"solver diverged at t={time:.6g} (max |field| = {max_abs:.3g})")
        self.time = time
        self.max_abs = max_abs


class SnapshotFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SnapshotVersionError(SnapshotFormatError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rayleigh: float = 1.0e4
    prandtl: float = 0.7
    domain_width: float = 2.0 * math.pi
    nx: int = 60
    ny: int = 33
    dt: float = 0.005
    top_temperature: float = 1.0
    base_bottom_temperature: float = 2.0

    def __post_init__(self):
        problems = []
        if not self.rayleigh > 0:
            problems.append("rayleigh must be positive")
        if not self.prandtl > 0:
            problems.append("prandtl must be positive")
        if not self.domain_width > 0:
            problems.append("domain_width must be positive")
        if self.nx < 16 or self.nx % 2:
            problems.append("nx must be an even integer >= 16")
        if self.ny < 17:
            problems.append("ny must be >= 17")
        if not self.dt > 0:
            problems.append("dt must be positive")
        if not self.base_bottom_temperature > self.top_temperature:
            problems.append("bottom temperature must exceed top temperature")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def nu(self) -> float:
        return math.sqrt(self.prandtl / self.rayleigh)

    @property
    def kappa(self) -> float:
        return 1.0 / math.sqrt(self.rayleigh * self.prandtl)

    @property
    def delta_t(self) -> float:
        return self.base_bottom_temperature - self.top_temperature


@dataclass
class FlowState:
    temperature: np.ndarray
    u: np.ndarray
    v: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        # one memory layout everywhere, so results never depend on how a state was built
        self.temperature = np.ascontiguousarray(self.temperature, dtype=np.float64)
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)

    def copy(self) -> FlowState:
        return FlowState(self.temperature.copy(), self.u.copy(), self.v.copy(), self.time)

    def fields(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.temperature, self.u, self.v

    def max_abs_diff(self, other: FlowState) -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.fields(), other.fields()))

    def identical(self, other: FlowState) -> bool:
        return self.time == other.time and all(
            np.array_equal(a, b) for a, b in zip(self.fields(), other.fields())
        )

    def combine(self, a: float, other: FlowState, b: float) -> FlowState:
        """``a*self + b*other`` fieldwise (time taken from ``self``)."""
        return FlowState(
            a * self.temperature + b * other.temperature,
            a * self.u + b * other.u,
            a * self.v + b * other.v,
            self.time,
        )


@dataclass
class WallProfile:
    """Temperature offsets added to the base bottom temperature, one per segment."""

    segment_offsets: np.ndarray = field(default_factory=lambda: np.zeros(10))

    def __post_init__(self):
        self.segment_offsets = np.asarray(self.segment_offsets, dtype=np.float64).reshape(-1)

    @property
    def n_segments(self) -> int:
        return self.segment_offsets.size

    @classmethod
    def uniform(cls, n_segments: int = 10) -> WallProfile:
        return cls(np.zeros(n_segments))


# ---------------------------------------------------------------------------
# Chebyshev machinery


def _cheb(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Differentiation matrix on x_j = cos(pi j / n), j = 0..n."""
    x = np.cos(np.pi * np.arange(n + 1) / n)
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n + 1)
    dx = x[:, None] - x[None, :]
    d = np.outer(c, 1.0 / c) / (dx + np.eye(n + 1))
    d -= np.diag(d.sum(axis=1))
    return d, x


def _clenshaw_curtis(n: int) -> np.ndarray:
    theta = np.pi * np.arange(n + 1) / n
    w = np.zeros(n + 1)
    v = np.ones(n - 1)
    inner = slice(1, n)
    if n % 2 == 0:
        w[0] = w[n] = 1.0 / (n * n - 1)
        for k in range(1, n // 2):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k * k - 1)
        v -= np.cos(n * theta[inner]) / (n * n - 1)
    else:
        w[0] = w[n] = 1.0 / (n * n)
        for k in range(1, (n - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k * k - 1)
    w[inner] = 2.0 * v / n
    return w


def _barycentric_matrix(nodes: np.ndarray, weights: np.ndarray, targets: np.ndarray) -> np.ndarray:
    out = np.zeros((targets.size, nodes.size))
    for i, t in enumerate(targets):
        diff = t - nodes
        hit = np.isclose(diff, 0.0, atol=1e-15, rtol=0.0)
        if hit.any():
            out[i, np.argmax(hit)] = 1.0
            continue
        terms = weights / diff
        out[i] = terms / terms.sum()
    return out


def probe_heights() -> np.ndarray:
    """Eight interior wall-normal probe stations (interior Lobatto points of a 9-point grid)."""
    m = np.arange(1, PROBE_ROWS + 1)
    return 0.5 * (1.0 - np.cos(np.pi * m / (PROBE_ROWS + 1)))


def probe_x_offset(n_columns: int, n_segments: int = 10) -> float:
    """Probe offset in units of the column spacing.

    Columns start at x = 0 unless every segment holds an odd number of
    columns; then they sit at cell centres so that each segment has a centre
    column (exact recentering and reflection).
    """
    if n_columns % n_segments == 0 and (n_columns // n_segments) % 2 == 1:
        return 0.5
    return 0.0


class Solver:
    """Precomputed operators for one :class:`SolverConfig` (cached per config)."""

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        nx, ny = cfg.nx, cfg.ny
        n = ny - 1
        dt_, t = _cheb(n)
        # y = (1 - t)/2 keeps index order: row 0 is the bottom wall
        self.y = 0.5 * (1.0 - t)
        self.D = -2.0 * dt_
        self.D2 = self.D @ self.D
        self.quad = 0.5 * _clenshaw_curtis(n)  # sums to 1 over [0, 1]
        self.x = cfg.domain_width * np.arange(nx) / nx
        self.nk = nx // 2 + 1
        self.k = np.arange(self.nk)
        self.alpha = 2.0 * np.pi * self.k / cfg.domain_width
        # derivative wavenumbers: Nyquist derivative set to zero
        self.ialpha = 1j * self.alpha
        self.ialpha[-1] = 0.0
        self.dealias = (self.k <= nx // 3).astype(float)
        bary_w = (-1.0) ** np.arange(ny)
        bary_w[0] *= 0.5
        bary_w[-1] *= 0.5
        self.bary_w = bary_w
        self.interp_y = _barycentric_matrix(self.y, bary_w, probe_heights())
        self._build_streamfunction_ops()
        self._build_scalar_ops()

    # -- operators ---------------------------------------------------------

    def _build_streamfunction_ops(self):
        cfg = self.cfg
        y, D = self.y, self.D
        ny = cfg.ny
        w = y * (1.0 - y)
        wp = 1.0 - 2.0 * y
        wpp = -2.0 * np.ones(ny)
        E = np.eye(ny)[:, 1:-1]  # interior values -> full grid, zero at the walls
        D1E, D2E = D @ E, D @ D @ E
        D3E, D4E = D @ D2E, D @ D @ D2E
        # derivatives of psi = w q, full grid
        self.P0 = w[:, None] * E
        self.P1 = wp[:, None] * E + w[:, None] * D1E
        self.P2 = wpp[:, None] * E + 2.0 * wp[:, None] * D1E + w[:, None] * D2E
        P4 = 6.0 * wpp[:, None] * D2E + 4.0 * wp[:, None] * D3E + w[:, None] * D4E
        self.w_int = w[1:-1]
        inner = slice(1, -1)
        m = ny - 2
        half = 0.5 * cfg.dt * cfg.nu
        self.ainv = np.zeros((self.nk, m, m))
        self.ainv_b = np.zeros((self.nk, m, m))
        for k in range(1, self.nk):
            a2 = self.alpha[k] ** 2
            lap = (self.P2 - a2 * self.P0)[inner]
            bih = (P4 - 2.0 * a2 * self.P2 + a2 * a2 * self.P0)[inner]
            ainv = np.linalg.inv(lap - half * bih)
            self.ainv[k] = ainv
            self.ainv_b[k] = ainv @ (lap + half * bih)

    def _build_scalar_ops(self):
        cfg = self.cfg
        ny = cfg.ny
        inner = slice(1, -1)
        eye = np.eye(ny)
        # temperature, Dirichlet at both walls, per mode
        half_t = 0.5 * cfg.dt * cfg.kappa
        m = ny - 2
        self.t_inv = np.zeros((self.nk, m, m))
        self.t_expl = np.zeros((self.nk, m, ny))
        self.t_bnd = np.zeros((self.nk, m, 2))
        for k in range(self.nk):
            lap = self.D2 - self.alpha[k] ** 2 * eye
            self.t_inv[k] = np.linalg.inv((eye - half_t * lap)[inner, inner])
            self.t_expl[k] = (eye + half_t * lap)[inner]
            self.t_bnd[k] = half_t * lap[inner][:, [0, -1]]
        # x-mean velocity, zero at both walls
        half_u = 0.5 * cfg.dt * cfg.nu
        self.u0_inv = np.linalg.inv((eye - half_u * self.D2)[inner, inner])
        self.u0_expl = (eye + half_u * self.D2)[inner, inner]

    # -- representation changes -------------------------------------------

    def to_spectral(self, state: FlowState):
        vh = np.fft.rfft(state.v, axis=1).T  # (nk, ny)
        q = np.zeros((self.nk, self.cfg.ny - 2), dtype=complex)
        a = self.alpha[1:-1, None]
        q[1:-1] = vh[1:-1, 1:-1] / (-1j * a * self.w_int[None, :])
        u0 = state.u.mean(axis=1)
        th = np.fft.rfft(state.temperature, axis=1).T
        return q, u0, th

    def velocity_spectra(self, q, u0):
        nx = self.cfg.nx
        uh = q @ self.P1.T
        vh = (-1j * self.alpha)[:, None] * (q @ self.P0.T)
        uh[0] = nx * u0
        vh[0] = 0.0
        return uh, vh

    def from_spectral(self, q, u0, th, time) -> FlowState:
        nx = self.cfg.nx
        uh, vh = self.velocity_spectra(q, u0)
        u = np.fft.irfft(uh.T, n=nx, axis=1)
        v = np.fft.irfft(vh.T, n=nx, axis=1)
        temp = np.fft.irfft(th.T, n=nx, axis=1)
        return FlowState(temp, u, v, time)

    # -- right-hand sides ---------------------------------------------------

    def _phys(self, spec):
        return np.fft.irfft((spec * self.dealias[:, None]).T, n=self.cfg.nx, axis=1)

    def _spec(self, phys):
        return np.fft.rfft(phys, axis=1).T * self.dealias[:, None]

    def nonlinear(self, q, u0, th):
        """Explicit terms: vorticity RHS (interior), temperature advection, mean-flow forcing."""
        D = self.D
        uh, vh = self.velocity_spectra(q, u0)
        a2 = (self.alpha**2)[:, None]
        wh = -(q @ self.P2.T - a2 * (q @ self.P0.T))
        wh[0] = -(D @ u0) * self.cfg.nx
        ia = self.ialpha[:, None]
        u = self._phys(uh)
        v = self._phys(vh)
        adv_w = u * self._phys(ia * wh) + v * self._phys(wh @ D.T)
        adv_t = u * self._phys(ia * th) + v * self._phys(th @ D.T)
        adv_u = u * self._phys(ia * uh) + v * self._phys(uh @ D.T)
        nw = self._spec(adv_w)
        nt = self._spec(adv_t)
        hx_mean = adv_u.mean(axis=1)
        # d(lap psi)/dt = u.grad(omega) + nu lap^2 psi - dT/dx
        rhs_w = (nw - ia * th)[:, 1:-1]
        return rhs_w, -nt, -hx_mean

    # -- time stepping -------------------------------------------------------

    def _implicit(self, q, u0, th, rhs_w, rhs_t, rhs_u, h, bottom_hat, top_hat):
        q_new = np.einsum("kij,kj->ki", self.ainv_b, q) + h * np.einsum(
            "kij,kj->ki", self.ainv, rhs_w
        )
        q_new[0] = 0.0
        q_new[-1] = 0.0
        u_new = np.zeros_like(u0)
        u_new[1:-1] = self.u0_inv @ (self.u0_expl @ u0[1:-1] + h * rhs_u[1:-1])
        bnd = np.stack([bottom_hat, top_hat], axis=1)  # (nk, 2)
        rhs = (
            np.einsum("kij,kj->ki", self.t_expl, th)
            + h * rhs_t[:, 1:-1]
            + np.einsum("kij,kj->ki", self.t_bnd, bnd)
        )
        th_new = np.empty_like(th)
        th_new[:, 1:-1] = np.einsum("kij,kj->ki", self.t_inv, rhs)
        th_new[:, 0] = bottom_hat
        th_new[:, -1] = top_hat
        return q_new, u_new, th_new

    def step_spectral(self, q, u0, th, bottom_hat, top_hat):
        dt = self.cfg.dt
        n1 = self.nonlinear(q, u0, th)
        qs, us, ts = self._implicit(q, u0, th, *n1, dt, bottom_hat, top_hat)
        n2 = self.nonlinear(qs, us, ts)
        avg = [0.5 * (a + b) for a, b in zip(n1, n2)]
        return self._implicit(q, u0, th, *avg, dt, bottom_hat, top_hat)

    def wall_spectra(self, profile: WallProfile):
        cfg = self.cfg
        bottom = bottom_wall_temperature(profile, cfg)
        top = np.full(cfg.nx, cfg.top_temperature)
        return np.fft.rfft(bottom), np.fft.rfft(top)

    def step(self, state: FlowState, profile: WallProfile) -> FlowState:
        q, u0, th = self.to_spectral(state)
        bh, tpp = self.wall_spectra(profile)
        q, u0, th = self.step_spectral(q, u0, th, bh, tpp)
        out = self.from_spectral(q, u0, th, state.time + self.cfg.dt)
        _check_blowup(out)
        return out

    # -- diagnostics ----------------------------------------------------------

    def divergence(self, state: FlowState) -> np.ndarray:
        """du/dx + dv/dy, with dv/dy taken in the wall-clamped basis v carries."""
        nx = self.cfg.nx
        uh = np.fft.rfft(state.u, axis=1).T
        vh = np.fft.rfft(state.v, axis=1).T
        dv = np.zeros_like(vh)
        dv[0] = self.D @ vh[0]
        a = self.alpha[1:-1, None]
        q = vh[1:-1, 1:-1] / (-1j * a * self.w_int[None, :])
        dv[1:-1] = -1j * a * (q @ self.P1.T)
        dv[-1] = self.D @ vh[-1]
        return np.fft.irfft((self.ialpha[:, None] * uh + dv).T, n=nx, axis=1)

    def probe_matrix_x(self, n_columns: int, n_segments: int = 10) -> np.ndarray:
        return _fourier_interp_matrix(
            self.cfg.nx, self.cfg.domain_width, n_columns, probe_x_offset(n_columns, n_segments)
        )


@functools.lru_cache(maxsize=16)
def get_solver(cfg: SolverConfig) -> Solver:
    return Solver(cfg)


@functools.lru_cache(maxsize=16)
def _fourier_interp_matrix(nx: int, lx: float, n_columns: int, offset: float) -> np.ndarray:
    """Rows evaluate the band-limited trigonometric interpolant of nx periodic samples."""
    xp = (np.arange(n_columns) + offset) * lx / n_columns
    coeffs = np.fft.rfft(np.eye(nx), axis=0)  # (nk, nx): spectrum of each unit sample
    k = np.arange(nx // 2 + 1)
    weight = np.full(k.size, 2.0)
    weight[0] = 1.0
    weight[-1] = 0.0
    phase = np.exp(2j * np.pi * np.outer(xp, k) / lx) * weight
    out = (phase @ coeffs).real
    # Nyquist mode is carried as a pure cosine
    out += np.cos(np.pi * nx * xp / lx)[:, None] * coeffs[-1].real[None, :]
    out /= nx
    # stations sitting on grid points sample them directly
    pos = xp * nx / lx
    on_grid = np.isclose(pos, np.round(pos), rtol=0.0, atol=1e-9)
    for p in np.flatnonzero(on_grid):
        out[p] = 0.0
        out[p, int(round(pos[p])) % nx] = 1.0
    return out


def _check_blowup(state: FlowState) -> None:
    worst = max(float(np.max(np.abs(f))) for f in state.fields())
    if not math.isfinite(worst) or worst > BLOWUP_THRESHOLD:
        raise BlowUpError(state.time, worst)


# ---------------------------------------------------------------------------
# public operations


def grid(cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    s = get_solver(cfg)
    return s.x.copy(), s.y.copy()


def segment_grid_weights(cfg: SolverConfig, n_segments: int) -> np.ndarray:
    """(n_segments, nx) trapezoid weights of each segment on the periodic grid.

    A grid point on the boundary between two segments counts half for each;
    every row sums to 1.
    """
    nx = cfg.nx
    if nx % n_segments:
        raise ConfigurationError(f"nx={nx} is not divisible by {n_segments} segments")
    per = nx // n_segments
    w = np.zeros((n_segments, nx))
    for j in range(nx):
        seg, rem = divmod(j, per)
        if rem:
            w[seg, j] = 1.0
        else:
            w[seg, j] += 0.5
            w[(seg - 1) % n_segments, j] += 0.5
    return w / per


def bottom_wall_temperature(profile: WallProfile, cfg: SolverConfig) -> np.ndarray:
    """Grid values of the bottom-wall temperature.

    Points inside segment i take T_H + offset_i; points on a boundary between
    two segments take the average of the two neighbours.
    """
    weights = segment_grid_weights(cfg, profile.n_segments) * (cfg.nx // profile.n_segments)
    # each grid point's weights sum to 1 across segments
    return cfg.base_bottom_temperature + profile.segment_offsets @ weights


def init_conduction(cfg: SolverConfig) -> FlowState:
    s = get_solver(cfg)
    profile = cfg.base_bottom_temperature - cfg.delta_t * s.y
    temp = np.repeat(profile[:, None], cfg.nx, axis=1)
    zeros = np.zeros((cfg.ny, cfg.nx))
    return FlowState(temp, zeros, zeros.copy(), 0.0)


def init_perturbed(cfg: SolverConfig, seed: int, amplitude: float) -> FlowState:
    """Conduction state plus a smooth random temperature perturbation.

    The perturbation carries the factor 4y(1-y), so both wall rows are exact,
    and its maximum magnitude equals ``amplitude``.
    """
    if amplitude < 0:
        raise PreconditionError("amplitude must be non-negative")
    base = init_conduction(cfg)
    if amplitude == 0:
        return base
    s = get_solver(cfg)
    rng = np.random.default_rng(seed)
    kmax = max(1, min(8, cfg.nx // 3))
    xx = s.x[None, :]
    yy = s.y[:, None]
    pert = np.zeros((cfg.ny, cfg.nx))
    for k in range(1, kmax + 1):
        for n in range(1, 4):
            c = rng.normal()
            phi = rng.uniform(0, 2 * np.pi)
            pert += c * np.cos(2 * np.pi * k * xx / cfg.domain_width + phi) * np.cos((n - 1) * np.pi * yy)
    pert *= 4.0 * yy * (1.0 - yy)
    pert *= amplitude / np.max(np.abs(pert))
    pert[0] = 0.0
    pert[-1] = 0.0
    return FlowState(base.temperature + pert, base.u, base.v, 0.0)


def random_state(cfg: SolverConfig, seed: int, amplitude: float = 0.1) -> FlowState:
    """A random, divergence-free, wall-consistent state (for property tests)."""
    s = get_solver(cfg)
    rng = np.random.default_rng(seed)
    kmax = cfg.nx // 3
    q = np.zeros((s.nk, cfg.ny - 2), dtype=complex)
    q[1 : kmax + 1] = rng.normal(size=(kmax, cfg.ny - 2)) + 1j * rng.normal(size=(kmax, cfg.ny - 2))
    q *= amplitude / np.sqrt(cfg.ny) * (s.w_int[None, :] ** 2) * 16
    u0 = np.zeros(cfg.ny)
    u0[1:-1] = amplitude * rng.normal(size=cfg.ny - 2) * 4 * s.w_int
    base = init_perturbed(cfg, seed, amplitude)
    th = np.fft.rfft(base.temperature, axis=1).T
    state = s.from_spectral(q, u0, th, 0.0)
    return state


def canonical(state: FlowState, cfg: SolverConfig) -> FlowState:
    """Round-trip through the solver representation (rebuilds u from v)."""
    s = get_solver(cfg)
    return s.from_spectral(*s.to_spectral(state), state.time)


def step(state: FlowState, profile: WallProfile, cfg: SolverConfig) -> FlowState:
    _check_grid(state, cfg)
    return get_solver(cfg).step(state, profile)


def steps_for(duration: float, cfg: SolverConfig) -> int:
    """Number of solver steps covering ``duration`` (rounded to the nearest multiple of dt)."""
    if not duration > 0:
        raise PreconditionError(f"duration must be positive, got {duration}")
    n = int(round(duration / cfg.dt))
    if n < 1:
        raise PreconditionError(f"duration {duration} is shorter than half a time step")
    return n


def advance(state: FlowState, profile: WallProfile, duration: float, cfg: SolverConfig) -> FlowState:
    """Hold ``profile`` fixed and take ``round(duration / dt)`` steps."""
    n = steps_for(duration, cfg)
    _check_grid(state, cfg)
    s = get_solver(cfg)
    for _ in range(n):
        state = s.step(state, profile)
    return state


def _check_grid(state: FlowState, cfg: SolverConfig) -> None:
    if state.temperature.shape != (cfg.ny, cfg.nx):
        raise PreconditionError(
            f"state grid {state.temperature.shape} does not match config ({cfg.ny}, {cfg.nx})"
        )


def divergence(state: FlowState, cfg: SolverConfig) -> np.ndarray:
    return get_solver(cfg).divergence(state)


def kinetic_energy(state: FlowState, cfg: SolverConfig) -> float:
    s = get_solver(cfg)
    return float(s.quad @ (0.5 * (state.u**2 + state.v**2)).mean(axis=1))


def nusselt_global(state: FlowState, cfg: SolverConfig) -> float:
    """Domain average of sqrt(Ra Pr) v T - dT/dy, over the conductive flux dT/H."""
    s = get_solver(cfg)
    dtdy = s.D @ state.temperature
    flux = math.sqrt(cfg.rayleigh * cfg.prandtl) * state.v * state.temperature - dtdy
    return float(s.quad @ flux.mean(axis=1)) / cfg.delta_t


def nusselt_wall(state: FlowState, cfg: SolverConfig, wall: str = "bottom") -> float:
    """Horizontally averaged conductive flux through one wall, normalised."""
    s = get_solver(cfg)
    row = 0 if wall == "bottom" else -1
    return float(-(s.D[row] @ state.temperature).mean()) / cfg.delta_t


def nusselt_local(state: FlowState, segment_index: int, cfg: SolverConfig, n_segments: int = 10) -> float:
    """Bottom-wall flux -dT/dy averaged over one segment, normalised."""
    if not 0 <= segment_index < n_segments:
        raise PreconditionError(f"segment index {segment_index} outside [0, {n_segments})")
    return float(nusselt_locals(state, cfg, n_segments)[segment_index])


def nusselt_locals(state: FlowState, cfg: SolverConfig, n_segments: int = 10) -> np.ndarray:
    s = get_solver(cfg)
    wall_flux = -(s.D[0] @ state.temperature)
    return segment_grid_weights(cfg, n_segments) @ wall_flux / cfg.delta_t


def probe_grid(state: FlowState, cfg: SolverConfig, n_columns: int = 32, n_segments: int = 10) -> np.ndarray:
    """Sample (T, u, v) at 8 wall-normal x ``n_columns`` periodic stations -> (3, 8, n_columns)."""
    s = get_solver(cfg)
    ix = s.probe_matrix_x(n_columns, n_segments)
    return np.stack([s.interp_y @ f @ ix.T for f in state.fields()])


def probe_mirror_columns(n_columns: int, n_segments: int = 10) -> np.ndarray:
    """Column permutation that the x-reflection induces on probe columns."""
    p = np.arange(n_columns)
    if probe_x_offset(n_columns, n_segments) == 0.5:
        return n_columns - 1 - p
    return (-p) % n_columns


def _reflect_x(f: np.ndarray) -> np.ndarray:
    # grid index j -> -j (mod nx), i.e. x -> Lx - x
    return np.roll(f[:, ::-1], 1, axis=1)


def mirror(state: FlowState) -> FlowState:
    """Reflect x -> Lx - x: T and v reflected, u reflected and negated."""
    return FlowState(
        _reflect_x(state.temperature), -_reflect_x(state.u), _reflect_x(state.v), state.time
    )


def mirror_profile(profile: WallProfile) -> WallProfile:
    return WallProfile(profile.segment_offsets[::-1].copy())


def translate(state: FlowState, k_segments: int, cfg: SolverConfig, n_segments: int = 10) -> FlowState:
    """Periodic shift of every field by ``k_segments`` segment widths (towards +x)."""
    if cfg.nx % n_segments:
        raise ConfigurationError(f"nx={cfg.nx} is not divisible by {n_segments} segments")
    shift = (k_segments * (cfg.nx // n_segments)) % cfg.nx
    return FlowState(*(np.roll(f, shift, axis=1) for f in state.fields()), state.time)


def translate_profile(profile: WallProfile, k_segments: int) -> WallProfile:
    return WallProfile(np.roll(profile.segment_offsets, k_segments))


# ---------------------------------------------------------------------------
# snapshots


def save_snapshot(state: FlowState, path: str | Path, cfg: SolverConfig) -> None:
    ny, nx = state.temperature.shape
    header = _HEADER.pack(
        SNAPSHOT_MAGIC, SNAPSHOT_VERSION, nx, ny, cfg.rayleigh, cfg.prandtl, cfg.domain_width, state.time
    )
    body = b"".join(np.ascontiguousarray(f, dtype="<f8").tobytes() for f in state.fields())
    Path(path).write_bytes(header + body)


def read_snapshot_header(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    return _parse_header(raw)


def _parse_header(raw: bytes) -> dict:
    if len(raw) < 8:
        raise SnapshotFormatError("truncated snapshot header", len(raw))
    if raw[:8] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError("bad magic bytes", 0)
    if len(raw) < _HEADER.size:
        raise SnapshotFormatError("truncated snapshot header", len(raw))
    magic, version, nx, ny, ra, pr, lx, time = _HEADER.unpack_from(raw, 0)
    if version != SNAPSHOT_VERSION:
        raise SnapshotVersionError(
            f"snapshot format version {version}, expected {SNAPSHOT_VERSION}", 8
        )
    return dict(version=version, nx=nx, ny=ny, rayleigh=ra, prandtl=pr, domain_width=lx, time=time)


def load_snapshot(path: str | Path) -> FlowState:
    raw = Path(path).read_bytes()
    head = _parse_header(raw)
    nx, ny = head["nx"], head["ny"]
    need = _HEADER.size + 3 * nx * ny * 8
    if len(raw) != need:
        raise SnapshotFormatError(
            f"expected {need} bytes for a {ny}x{nx} snapshot, found {len(raw)}", min(len(raw), need)
        )
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    t, u, v = body.reshape(3, ny, nx)
    return FlowState(t.copy(), u.copy(), v.copy(), head["time"])
