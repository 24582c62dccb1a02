"""Experiment configuration: one YAML file, one section per module.

Unknown sections or keys are rejected, so a misspelled hyperparameter fails
loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .marl_env import EnvConfig
from .policy_nets import NetworkSpec
from .ppo_trainer import PPOHyper
from .rbc_solver import ConfigurationError, SolverConfig


@dataclass(frozen=True)
class BaselineConfig:
    horizon: float = 500.0
    # Nu_base is the time average over the last `average_window` time units
    average_window: float = 100.0
    sample_interval: float = 1.5
    seed: int = 0
    amplitude: float = 0.1

    def __post_init__(self):
        if not (self.horizon > 0 and 0 < self.average_window <= self.horizon and self.sample_interval > 0):
            raise ConfigurationError("baseline needs 0 < average_window <= horizon and sample_interval > 0")


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0, 1)
    episodes: int = 300
    output_dir: str = "runs"
    checkpoint_every: int = 25
    record_wall_clock: bool = False
    snapshot_times: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "snapshot_times", tuple(float(t) for t in self.snapshot_times))
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")


SECTIONS = {
    "solver": SolverConfig,
    "env": EnvConfig,
    "network": NetworkSpec,
    "ppo": PPOHyper,
    "baseline": BaselineConfig,
    "run": RunConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    ppo: PPOHyper = field(default_factory=PPOHyper)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        expected = (3, 8, self.env.probe_columns)
        if self.network.obs_shape != expected:
            raise ConfigurationError(
                f"network.obs_shape {list(self.network.obs_shape)} does not match the probe image {list(expected)}"
            )
        if self.solver.nx % self.env.n_segments:
            raise ConfigurationError(f"solver.nx={self.solver.nx} must be divisible by env.n_segments")

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _build(cls, raw, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"section '{section}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in section '{section}': {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if isinstance(value, list):
            value = tuple(value)
        elif isinstance(value, int) and not isinstance(value, bool) and "float" in str(f.type):
            value = float(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"section '{section}': {exc}") from exc


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigurationError("configuration root must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(unknown)}")
    return ExperimentConfig(**{name: _build(cls, raw.get(name), name) for name, cls in SECTIONS.items()})


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed YAML: {exc}") from exc
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def desk_config(**run_overrides) -> ExperimentConfig:
    """Small grid and short episodes for tests and smoke runs."""
    return ExperimentConfig(
        solver=SolverConfig(nx=40, ny=25, dt=0.01),
        env=EnvConfig(actions_per_episode=20, action_duration=0.5),
        network=NetworkSpec(hidden_width=32, conv_kernels=8, cnn_hidden=8),
        ppo=PPOHyper(update_epochs=2),
        baseline=BaselineConfig(horizon=60.0, average_window=20.0),
        run=RunConfig(**{"seeds": (0,), "episodes": 5, "checkpoint_every": 0, **run_overrides}),
    )
