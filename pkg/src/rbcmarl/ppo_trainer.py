"""PPO-Clip on the shared segment policy.

Every environment step yields one transition per agent.  Agent streams are
kept separate for advantage estimation and pooled for the update, so all
agents read and write one parameter set.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import gradcore as gc
from . import marl_env as me
from . import policy_nets as pn
from .gradcore import Tensor, UsageError

if TYPE_CHECKING:
    from .config import ExperimentConfig

log = logging.getLogger(__name__)

TRAINING_LOG_HEADER = ["episode", "mean_nu", "final_nu", "mean_reward", "clip_fraction", "approx_kl", "wall_seconds"]
MOVING_AVERAGE_WINDOW = 25


class NumericalError(FloatingPointError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class PPOHyper:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3.0e-4
    update_epochs: int = 4
    minibatch_size: int = 64
    episodes_per_update: int = 1
    target_kl: float | None = 0.02
    entropy_coef: float = 0.0
    normalize_advantages: bool = True

    def __post_init__(self):
        problems = []
        if not 0.0 < self.clip_eps < 1.0:
            problems.append("clip_eps must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            problems.append("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            problems.append("gae_lambda must lie in [0, 1]")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if min(self.update_epochs, self.minibatch_size, self.episodes_per_update) < 1:
            problems.append("update_epochs, minibatch_size and episodes_per_update must be >= 1")
        if self.target_kl is not None and not self.target_kl > 0:
            problems.append("target_kl must be positive or null")
        if problems:
            raise me.ConfigurationError("; ".join(problems))


# ---------------------------------------------------------------------------
# rollout storage


@dataclass
class EpisodeRecord:
    """Arrays indexed [step, agent] (views carry two more leading axes)."""

    views: np.ndarray  # (T, N, C, H, W)
    samples: np.ndarray  # pre-clip Gaussian draws, (T, N)
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    bootstrap: np.ndarray  # (N,) value after the last step; zero when truncated
    truncated: bool
    nu_global: np.ndarray  # (T,)

    @property
    def length(self) -> int:
        return self.rewards.shape[0]


@dataclass
class RolloutBuffer:
    episodes: list[EpisodeRecord] = field(default_factory=list)
    advantages: np.ndarray | None = None  # flat, normalised when requested
    returns: np.ndarray | None = None  # flat, unnormalised advantage + value

    def __len__(self) -> int:
        return sum(ep.rewards.size for ep in self.episodes)

    def flat(self, name: str) -> np.ndarray:
        parts = [getattr(ep, name) for ep in self.episodes]
        if name == "views":
            return np.concatenate([p.reshape((-1,) + p.shape[2:]) for p in parts])
        return np.concatenate([p.reshape(-1) for p in parts])


def collect_rollout(
    make_sim: Callable[[], me.Simulation],
    net,
    hyper: PPOHyper,
    rng: np.random.Generator,
    n_episodes: int | None = None,
) -> RolloutBuffer:
    """Run whole episodes with stochastic actions from the shared policy."""
    buf = RolloutBuffer()
    for _ in range(hyper.episodes_per_update if n_episodes is None else n_episodes):
        sim = make_sim()
        cols = {k: [] for k in ("views", "samples", "log_probs", "rewards", "values")}
        nus = []
        views = sim.views()
        truncated = False
        while not sim.done:
            out = net.evaluate(views)
            action, sample, logp = pn.act(out, "stochastic", rng)
            agents, _ = me.episode_step(sim, action)
            cols["views"].append(views)
            cols["samples"].append(sample)
            cols["log_probs"].append(logp)
            cols["values"].append(out.value)
            cols["rewards"].append(np.array([a.reward for a in agents]))
            nus.append(sim.history[-1].nu_global)
            views = np.stack([a.observation for a in agents])
            if sim.aborted:
                truncated = True
                log.warning("episode truncated by solver blow-up at step %d", sim.step_count)
        n = sim.env_cfg.n_segments
        bootstrap = np.zeros(n) if truncated else net.evaluate(views).value
        buf.episodes.append(
            EpisodeRecord(
                views=np.stack(cols["views"]),
                samples=np.stack(cols["samples"]),
                log_probs=np.stack(cols["log_probs"]),
                rewards=np.stack(cols["rewards"]),
                values=np.stack(cols["values"]),
                bootstrap=bootstrap,
                truncated=truncated,
                nu_global=np.asarray(nus),
            )
        )
    return buf


def gae(rewards: np.ndarray, values: np.ndarray, bootstrap: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Advantages for [step, stream] arrays; ``bootstrap`` is V after the last step."""
    adv = np.zeros_like(rewards, dtype=np.float64)
    running = np.zeros(rewards.shape[1:])
    next_value = bootstrap
    for t in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


def compute_gae(buf: RolloutBuffer, hyper: PPOHyper, normalize: bool | None = None) -> RolloutBuffer:
    if len(buf) == 0:
        raise UsageError("compute_gae: empty rollout buffer")
    adv = np.concatenate(
        [gae(ep.rewards, ep.values, ep.bootstrap, hyper.gamma, hyper.gae_lambda).reshape(-1) for ep in buf.episodes]
    )
    buf.returns = adv + buf.flat("values")
    normalize = hyper.normalize_advantages if normalize is None else normalize
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    buf.advantages = adv
    return buf


# ---------------------------------------------------------------------------
# losses


def clipped_surrogate(ratio: Tensor, advantages, eps: float) -> Tensor:
    """Per-sample min(ratio A, clip(ratio, 1-eps, 1+eps) A)."""
    a = Tensor(np.asarray(advantages, dtype=np.float64))
    return gc.min_pairwise(gc.mul(ratio, a), gc.mul(gc.clip_by_value(ratio, 1.0 - eps, 1.0 + eps), a))


@dataclass
class Batch:
    views: np.ndarray
    samples: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(*(getattr(self, f)[idx] for f in ("views", "samples", "log_probs", "advantages", "returns")))

    @classmethod
    def from_buffer(cls, buf: RolloutBuffer) -> Batch:
        if buf.advantages is None:
            raise UsageError("advantages missing; call compute_gae first")
        return cls(buf.flat("views"), buf.flat("samples"), buf.flat("log_probs"), buf.advantages, buf.returns)


def _ratio(log_prob_new: Tensor, log_prob_old: np.ndarray) -> Tensor:
    ratio = gc.exp(gc.sub(log_prob_new, Tensor(log_prob_old)))
    bad = np.flatnonzero(~np.isfinite(ratio.values))
    if bad.size:
        raise NumericalError(f"non-finite probability ratio at sample {bad[0]}", int(bad[0]))
    return ratio


def ppo_loss(batch: Batch, net, hyper: PPOHyper, forward=None) -> Tensor:
    """Negated mean clipped surrogate."""
    mean, log_std, _ = forward if forward is not None else net.forward(batch.views)
    logp = gc.gaussian_logpdf(Tensor(batch.samples), mean, log_std)
    surr = clipped_surrogate(_ratio(logp, batch.log_probs), batch.advantages, hyper.clip_eps)
    return gc.neg(gc.mean(surr))


def value_loss(batch: Batch, net, forward=None) -> Tensor:
    _, _, value = forward if forward is not None else net.forward(batch.views)
    return gc.mean(gc.square(gc.sub(value, Tensor(batch.returns))))


@dataclass
class UpdateReport:
    policy_loss: float
    value_loss: float
    clip_fraction: float
    approx_kl: float
    epochs_run: int
    minibatches: int
    early_stopped: bool


class NonFiniteLossError(NumericalError):
    pass


def update(
    net: pn.PolicyNet,
    buf: RolloutBuffer,
    hyper: PPOHyper,
    rng: np.random.Generator,
    adam: gc.AdamState | None = None,
    abort_checkpoint: str | Path | None = None,
) -> UpdateReport:
    """Minibatch Adam epochs on policy + value loss (separate trunks, one optimiser)."""
    batch = Batch.from_buffer(buf)
    params = net.parameters()
    if adam is None:
        adam = gc.AdamState.for_params(params)
    before = net.clone()
    n = batch.advantages.size
    pls, vls, clipped, kls = [], [], [], []
    epochs_run = 0
    stopped = False
    for _ in range(hyper.update_epochs):
        epochs_run += 1
        order = rng.permutation(n)
        epoch_kl = []
        for start in range(0, n, hyper.minibatch_size):
            mb = batch.take(order[start : start + hyper.minibatch_size])
            net.zero_grad()
            fwd = net.forward(mb.views)
            pl = ppo_loss(mb, net, hyper, fwd)
            vl = value_loss(mb, net, fwd)
            total = gc.add(pl, vl)
            if hyper.entropy_coef:
                entropy = gc.mean(fwd[1])  # Gaussian entropy up to a constant
                total = gc.sub(total, gc.scale(entropy, hyper.entropy_coef))
            if not math.isfinite(total.item()):
                if abort_checkpoint is not None:
                    pn.save_checkpoint(before, abort_checkpoint)
                raise NonFiniteLossError(f"non-finite loss {total.item()} during update")
            logp = gc.gaussian_logpdf(Tensor(mb.samples), Tensor(fwd[0].values), Tensor(fwd[1].values)).values
            log_ratio = logp - mb.log_probs
            ratio = np.exp(log_ratio)
            epoch_kl.append(float(np.mean((ratio - 1.0) - log_ratio)))
            clipped.append(float(np.mean(np.abs(ratio - 1.0) > hyper.clip_eps)))
            gc.backward(total)
            gc.adam_step(params, [p.grad for p in params], adam, hyper.learning_rate)
            pls.append(pl.item())
            vls.append(vl.item())
        kls.extend(epoch_kl)
        if hyper.target_kl is not None and float(np.mean(epoch_kl)) > hyper.target_kl:
            stopped = True
            break
    return UpdateReport(
        policy_loss=float(np.mean(pls)),
        value_loss=float(np.mean(vls)),
        clip_fraction=float(np.mean(clipped)),
        approx_kl=float(np.mean(kls)),
        epochs_run=epochs_run,
        minibatches=len(pls),
        early_stopped=stopped,
    )


# ---------------------------------------------------------------------------
# training loop


def moving_average(x, window: int = MOVING_AVERAGE_WINDOW) -> np.ndarray:
    """Trailing mean over up to ``window`` entries (shorter at the start)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def variant_name(network: pn.NetworkSpec, env_cfg: me.EnvConfig) -> str:
    base = {"FC": "FC", "GI_NN": "GI-NN", "GI_CNN": "GI-CNN"}[network.trunk_kind]
    return f"PE-{base}" if env_cfg.pe_enabled else base


def obs_shape_for(env_cfg: me.EnvConfig) -> tuple[int, int, int]:
    return (3, me.rs.PROBE_ROWS, env_cfg.probe_columns)


@dataclass
class TrainResult:
    rows: list[dict]
    net: pn.PolicyNet
    run_dir: Path


def _fmt(x: float) -> str:
    return repr(float(x))


def train(config: ExperimentConfig, seed: int, run_dir: str | Path, snapshot, nu_base: float | None) -> TrainResult:
    """Alternate rollout collection and updates for ``config.run.episodes`` episodes.

    Writes ``training.csv``, ``events.jsonl`` and checkpoints under ``run_dir``.
    Everything random derives from ``seed``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    init_seed, act_seed = ss.spawn(2)
    net = pn.PolicyNet(config.network, int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(act_seed)
    adam = gc.AdamState.for_params(net.parameters())

    def make_sim():
        return me.reset_episode(config.solver, config.env, snapshot, nu_base)

    rows: list[dict] = []
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    every = config.run.checkpoint_every
    with open(run_dir / "training.csv", "w", newline="") as fh, open(run_dir / "events.jsonl", "w") as ev:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAINING_LOG_HEADER)
        fh.flush()
        episode = 0
        while episode < config.run.episodes:
            t0 = time.perf_counter()
            n_ep = min(config.ppo.episodes_per_update, config.run.episodes - episode)
            buf = collect_rollout(make_sim, net, config.ppo, rng, n_ep)
            compute_gae(buf, config.ppo)
            report = update(net, buf, config.ppo, rng, adam, ckpt_dir / f"abort_{episode:05d}.ckpt")
            elapsed = time.perf_counter() - t0
            for ep in buf.episodes:
                episode += 1
                row = {
                    "episode": episode,
                    "mean_nu": float(np.mean(ep.nu_global)) if not ep.truncated else float(np.nanmean(ep.nu_global)),
                    "final_nu": float(ep.nu_global[-1]),
                    "mean_reward": float(np.mean(ep.rewards)),
                    "clip_fraction": report.clip_fraction,
                    "approx_kl": report.approx_kl,
                    "wall_seconds": elapsed / n_ep if config.run.record_wall_clock else 0.0,
                }
                rows.append(row)
                writer.writerow([row["episode"]] + [_fmt(row[k]) for k in TRAINING_LOG_HEADER[1:]])
                fh.flush()
                event = {"event": "update", "episode": episode, "truncated": ep.truncated, **asdict(report)}
                if config.run.record_wall_clock:
                    event["wall_seconds"] = elapsed / n_ep
                ev.write(json.dumps(event, sort_keys=True) + "\n")
                ev.flush()
                if every and episode % every == 0:
                    pn.save_checkpoint(net, ckpt_dir / f"episode_{episode:05d}.ckpt")
        pn.save_checkpoint(net, run_dir / "final.ckpt")
    return TrainResult(rows, net, run_dir)
