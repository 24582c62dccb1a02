"""Multi-agent pseudo-environments sharing one convection simulation.

One policy controls every bottom-wall segment.  Each agent sees the global
probe image circularly shifted so that its own segment sits at the centre
column; all agents' actions are merged, made mean-free, clamped, and applied
together for one actuation window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rbc_solver as rs
from .rbc_solver import ConfigurationError, FlowState, PreconditionError, SolverConfig, WallProfile

log = logging.getLogger(__name__)

PE_FORMS = ("sine", "literal")


@dataclass(frozen=True)
class EnvConfig:
    n_segments: int = 10
    actions_per_episode: int = 200
    action_duration: float = 1.5
    beta: float = 0.0015
    reward_scale: float = 1.0
    # None means "use the measured baseline Nusselt number"
    reward_offset: float | None = None
    clamp_limit: float = 0.75
    pe_enabled: bool = False
    pe_amplitude: float = 1.0
    pe_form: str = "sine"
    probe_columns: int = 32

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.beta <= 1.0:
            problems.append("beta must lie in [0, 1]")
        if not self.clamp_limit > 0:
            problems.append("clamp_limit must be positive")
        if self.actions_per_episode < 1:
            problems.append("actions_per_episode must be >= 1")
        if self.n_segments < 1:
            problems.append("n_segments must be >= 1")
        if not self.action_duration > 0:
            problems.append("action_duration must be positive")
        if self.pe_form not in PE_FORMS:
            problems.append(f"pe_form must be one of {PE_FORMS}")
        if self.probe_columns < 2 or self.probe_columns % 2:
            problems.append("probe_columns must be an even integer >= 2")
        if problems:
            raise ConfigurationError("; ".join(problems))


# ---------------------------------------------------------------------------
# actions and rewards


def process_actions(raw, cfg: EnvConfig) -> np.ndarray:
    """Subtract the mean of the raw actions, then clamp to +-clamp_limit.

    The clamp can reintroduce a small nonzero mean; it is logged, not removed.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (cfg.n_segments,):
        raise PreconditionError(f"expected {cfg.n_segments} raw actions, got shape {raw.shape}")
    if np.any(~np.isfinite(raw)) or np.any(np.abs(raw) > 1.0):
        raise PreconditionError("raw actions must lie in [-1, 1]")
    centred = mean_free(raw)
    final = np.clip(centred, -cfg.clamp_limit, cfg.clamp_limit)
    residual = final.mean()
    if residual != 0.0:
        log.debug("post-clamp mean offset %.3e", residual)
    return final


def mean_free(raw) -> np.ndarray:
    """Subtract the mean; a second pass removes the rounding left by the first."""
    centred = np.asarray(raw, dtype=np.float64) - np.mean(raw)
    return centred - np.mean(centred)


def reward(nu_global: float, nu_local: float, cfg: EnvConfig, offset: float | None = None) -> float:
    """m * (n - (1 - beta) Nu_global - beta Nu_local)."""
    n = cfg.reward_offset if offset is None else offset
    if n is None:
        raise ConfigurationError("reward offset unset; run the baseline command or set reward_offset")
    return cfg.reward_scale * (n - (1.0 - cfg.beta) * nu_global - cfg.beta * nu_local)


# ---------------------------------------------------------------------------
# observation geometry


def probe_x(cfg: EnvConfig, domain_width: float) -> np.ndarray:
    w = cfg.probe_columns
    return (np.arange(w) + rs.probe_x_offset(w, cfg.n_segments)) * domain_width / w


def positional_encoding_field(cfg: EnvConfig, domain_width: float) -> np.ndarray:
    """Row-constant (8, W) sine field over the probe columns.

    ``pe_form='sine'`` uses amplitude*sin(2 pi x / Lx), zero at x = 0 and
    periodic; ``'literal'`` uses amplitude*sin(x / (2 pi)).
    """
    x = probe_x(cfg, domain_width)
    if cfg.pe_form == "sine":
        row = np.sin(2.0 * math.pi * x / domain_width)
    else:
        row = np.sin(x / (2.0 * math.pi))
    return cfg.pe_amplitude * np.repeat(row[None, :], rs.PROBE_ROWS, axis=0)


def inject_positional_encoding(obs: np.ndarray, cfg: EnvConfig, domain_width: float) -> np.ndarray:
    """Add the encoding field to the temperature channel only."""
    out = np.array(obs, dtype=np.float64, copy=True)
    out[..., 0, :, :] = out[..., 0, :, :] + positional_encoding_field(cfg, domain_width)
    return out


def recenter_shift(agent_index: int, cfg: EnvConfig) -> int:
    """Column shift putting agent ``agent_index``'s segment centre at column W/2.

    The segment centre in probe-column coordinates is rounded half-to-even,
    which keeps the mapping symmetric under the x-reflection.
    """
    if not 0 <= agent_index < cfg.n_segments:
        raise PreconditionError(f"agent index {agent_index} outside [0, {cfg.n_segments})")
    w = cfg.probe_columns
    centre = (agent_index + 0.5) * w / cfg.n_segments - rs.probe_x_offset(w, cfg.n_segments)
    return int(np.rint(centre)) - w // 2


def recenter(obs: np.ndarray, agent_index: int, cfg: EnvConfig) -> np.ndarray:
    """Circular column shift; view column q holds global column q + shift."""
    return np.roll(obs, -recenter_shift(agent_index, cfg), axis=-1)


def uncenter(view: np.ndarray, agent_index: int, cfg: EnvConfig) -> np.ndarray:
    return np.roll(view, recenter_shift(agent_index, cfg), axis=-1)


def all_views(obs: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """(N_s, 3, 8, W) recentered views of one global observation."""
    return np.stack([recenter(obs, i, cfg) for i in range(cfg.n_segments)])


def policy_views(obs: np.ndarray, cfg: EnvConfig, domain_width: float) -> np.ndarray:
    """Encoding (when enabled) is added before recentering."""
    if cfg.pe_enabled:
        obs = inject_positional_encoding(obs, cfg, domain_width)
    return all_views(obs, cfg)


# ---------------------------------------------------------------------------
# episode loop


@dataclass
class AgentView:
    agent_index: int
    observation: np.ndarray
    reward: float
    done: bool
    aborted: bool = False


@dataclass
class StepInfo:
    nu_global: float
    nu_local: np.ndarray
    final_actions: np.ndarray
    time: float
    aborted: bool = False
    error: str | None = None


@dataclass
class Simulation:
    """The single shared simulation behind all pseudo-environments."""

    solver_cfg: SolverConfig
    env_cfg: EnvConfig
    state: FlowState
    reward_offset: float
    step_count: int = 0
    aborted: bool = False
    history: list[StepInfo] = field(default_factory=list)

    @property
    def observation(self) -> np.ndarray:
        return rs.probe_grid(self.state, self.solver_cfg, self.env_cfg.probe_columns, self.env_cfg.n_segments)

    def views(self) -> np.ndarray:
        return policy_views(self.observation, self.env_cfg, self.solver_cfg.domain_width)

    def nusselt(self) -> tuple[float, np.ndarray]:
        return (
            rs.nusselt_global(self.state, self.solver_cfg),
            rs.nusselt_locals(self.state, self.solver_cfg, self.env_cfg.n_segments),
        )

    @property
    def done(self) -> bool:
        return self.aborted or self.step_count >= self.env_cfg.actions_per_episode


def reset_episode(
    solver_cfg: SolverConfig,
    env_cfg: EnvConfig,
    snapshot: FlowState | str | None,
    nu_base: float | None = None,
) -> Simulation:
    """Start an episode from the stored baseline state (a fresh copy each time)."""
    if snapshot is None:
        raise ConfigurationError("no baseline snapshot; run `rbcmarl baseline` first")
    if not isinstance(snapshot, FlowState):
        try:
            snapshot = rs.load_snapshot(snapshot)
        except FileNotFoundError as exc:
            raise ConfigurationError(
                f"baseline snapshot {snapshot} not found; run `rbcmarl baseline` first"
            ) from exc
    if solver_cfg.nx % env_cfg.n_segments:
        raise ConfigurationError(f"nx={solver_cfg.nx} is not divisible by {env_cfg.n_segments} segments")
    offset = env_cfg.reward_offset if env_cfg.reward_offset is not None else nu_base
    if offset is None:
        offset = rs.nusselt_global(snapshot, solver_cfg)
    return Simulation(solver_cfg, env_cfg, snapshot.copy(), float(offset))


def episode_step(sim: Simulation, raw_actions) -> tuple[list[AgentView], bool]:
    """Apply the merged action for one actuation window and return per-agent views.

    Rewards come from the encoding-free fields; views carry the encoding
    when it is enabled.
    """
    if sim.done:
        raise PreconditionError("episode already finished")
    cfg = sim.env_cfg
    final = process_actions(raw_actions, cfg)
    profile = WallProfile(final)
    try:
        sim.state = rs.advance(sim.state, profile, cfg.action_duration, sim.solver_cfg)
    except rs.BlowUpError as exc:
        sim.aborted = True
        sim.step_count += 1
        info = StepInfo(float("nan"), np.full(cfg.n_segments, np.nan), final, exc.time, True, str(exc))
        sim.history.append(info)
        views = sim.views()
        return [AgentView(i, views[i], 0.0, True, True) for i in range(cfg.n_segments)], True
    sim.step_count += 1
    nu_g, nu_l = sim.nusselt()
    sim.history.append(StepInfo(nu_g, nu_l, final, sim.state.time))
    views = sim.views()
    done = sim.done
    out = [
        AgentView(i, views[i], reward(nu_g, nu_l[i], cfg, sim.reward_offset), done)
        for i in range(cfg.n_segments)
    ]
    return out, done
