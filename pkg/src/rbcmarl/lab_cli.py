"""``rbcmarl`` command line: baseline, train, evaluate, verify, plot.

Exit status is 0 on success, 1 when a check or run fails and 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as cf
from . import marl_env as me
from . import policy_nets as pn
from . import ppo_trainer as pt
from . import rbc_solver as rs
from . import verify as vf
from .rbc_solver import ConfigurationError, WallProfile

log = logging.getLogger("rbcmarl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
BASELINE_SNAPSHOT = "baseline.snap"
BASELINE_META = "baseline.json"
LEARNING_CURVE_HEADER = ["episode", "variant", "mean_nu", "moving_avg_25"]
MEAN_CURVE_HEADER = ["episode", "variant", "mean_nu", "moving_avg_25", "n_runs"]


class SchemaError(ValueError):
    pass


class UsageFailure(Exception):
    """Raised for problems the user fixes on the command line (exit status 2)."""


# ---------------------------------------------------------------------------
# baseline


@dataclass
class BaselineResult:
    state: rs.FlowState
    nu_base: float
    nu_snapshot: float
    times: np.ndarray
    nu_series: np.ndarray


def run_baseline(config: cf.ExperimentConfig, seed: int | None = None) -> BaselineResult:
    """Uncontrolled run over a fixed horizon; Nu_base averages the final window."""
    b = config.baseline
    solver = config.solver
    state = rs.init_perturbed(solver, b.seed if seed is None else seed, b.amplitude)
    zero = WallProfile.uniform(config.env.n_segments)
    n_samples = max(1, int(round(b.horizon / b.sample_interval)))
    times, nus = [], []
    for _ in range(n_samples):
        state = rs.advance(state, zero, b.sample_interval, solver)
        times.append(state.time)
        nus.append(rs.nusselt_global(state, solver))
    times, nus = np.asarray(times), np.asarray(nus)
    window = times >= times[-1] - b.average_window + 1e-9
    return BaselineResult(state, float(nus[window].mean()), float(nus[-1]), times, nus)


def load_baseline(directory: str | Path) -> tuple[rs.FlowState, dict]:
    directory = Path(directory)
    snap, meta = directory / BASELINE_SNAPSHOT, directory / BASELINE_META
    if not snap.exists() or not meta.exists():
        raise UsageFailure(f"no baseline in {directory}; run `rbcmarl baseline --out {directory}` first")
    return rs.load_snapshot(snap), json.loads(meta.read_text())


def cmd_baseline(config: cf.ExperimentConfig, out: Path, seeds: list[int] | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    seed = seeds[0] if seeds else None
    try:
        res = run_baseline(config, seed)
    except rs.BlowUpError as exc:
        print(f"baseline blew up at t={exc.time:.3f} (max |field| {exc.max_abs:.3e})", file=sys.stderr)
        return EXIT_FAIL
    rs.save_snapshot(res.state, out / BASELINE_SNAPSHOT, config.solver)
    meta = {
        "nu_base": res.nu_base,
        "nu_snapshot": res.nu_snapshot,
        "time": res.state.time,
        "seed": config.baseline.seed if seed is None else seed,
        "snapshot": BASELINE_SNAPSHOT,
    }
    (out / BASELINE_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(out / "baseline_nu.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "nu_global"])
        w.writerows([repr(float(t)), repr(float(n))] for t, n in zip(res.times, res.nu_series))
    config.save(out / "config.yaml")
    print(f"Nu_base {res.nu_base:.6f} (snapshot Nu {res.nu_snapshot:.6f}) -> {out / BASELINE_SNAPSHOT}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training


def write_learning_curve(path: Path, variant: str, mean_nu) -> None:
    ma = pt.moving_average(mean_nu)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEARNING_CURVE_HEADER)
        for i, (nu, m) in enumerate(zip(mean_nu, ma), start=1):
            w.writerow([i, variant, repr(float(nu)), repr(float(m))])


def write_mean_curve(path: Path, variant: str, runs: list[np.ndarray]) -> None:
    n = min(len(r) for r in runs)
    mean = np.mean([r[:n] for r in runs], axis=0)
    ma = pt.moving_average(mean)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEAN_CURVE_HEADER)
        for i in range(n):
            w.writerow([i + 1, variant, repr(float(mean[i])), repr(float(ma[i])), len(runs)])


def cmd_train(config: cf.ExperimentConfig, out: Path, seeds: list[int] | None, baseline_dir: Path | None) -> int:
    snapshot, meta = load_baseline(baseline_dir or out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    variant = pt.variant_name(config.network, config.env)
    curves, failed = [], []
    for seed in seeds or list(config.run.seeds):
        run_dir = out / f"seed_{seed}"
        try:
            result = pt.train(config, seed, run_dir, snapshot, meta["nu_base"])
        except (pt.NumericalError, rs.BlowUpError) as exc:
            print(f"seed {seed} failed: {exc}", file=sys.stderr)
            failed.append(seed)
            continue
        nu = np.array([r["mean_nu"] for r in result.rows])
        write_learning_curve(out / f"learning_curve_seed_{seed}.csv", variant, nu)
        curves.append(nu)
        print(f"seed {seed}: {len(nu)} episodes, last mean Nu {nu[-1]:.5f} -> {run_dir}")
    if curves:
        write_mean_curve(out / "learning_curve_mean.csv", variant, curves)
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# evaluation


EVAL_HEADER_PREFIX = ["actuation_index", "nu_global"]


def evaluation_header(n_segments: int) -> list[str]:
    return (
        EVAL_HEADER_PREFIX
        + [f"nu_local_{i}" for i in range(n_segments)]
        + [f"action_{i}" for i in range(n_segments)]
    )


def export_fields_csv(state: rs.FlowState, cfg, path: Path) -> None:
    x, y = rs.grid(cfg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "temperature", "u", "v"])
        for j in range(cfg.ny):
            for i in range(cfg.nx):
                w.writerow([repr(float(x[i])), repr(float(y[j]))] + [repr(float(f[j, i])) for f in state.fields()])


def run_evaluation(config: cf.ExperimentConfig, net: pn.PolicyNet, snapshot, nu_base: float, mode: str, seed: int, out: Path):
    """One episode; returns the CSV path."""
    if net.spec != config.network:
        raise UsageFailure(f"checkpoint network {net.spec} does not match config network {config.network}")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sim = me.reset_episode(config.solver, config.env, snapshot, nu_base)
    pending = sorted(config.run.snapshot_times)  # measured from the start of the episode
    start = sim.state.time
    path = out / f"evaluation_{mode}_seed_{seed}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(evaluation_header(config.env.n_segments))
        while not sim.done:
            out_ = net.evaluate(sim.views())
            action, _, _ = pn.act(out_, mode, rng)
            me.episode_step(sim, action)
            info = sim.history[-1]
            w.writerow(
                [sim.step_count, repr(float(info.nu_global))]
                + [repr(float(v)) for v in info.nu_local]
                + [repr(float(a)) for a in info.final_actions]
            )
            while pending and sim.state.time - start >= pending[0] - 1e-9:
                t = pending.pop(0)
                snap_dir = out / "snapshots"
                snap_dir.mkdir(exist_ok=True)
                stem = f"{mode}_seed_{seed}_t{t:09.3f}"
                rs.save_snapshot(sim.state, snap_dir / f"{stem}.snap", config.solver)
                export_fields_csv(sim.state, config.solver, snap_dir / f"{stem}.csv")
    return path


def cmd_evaluate(config, out: Path, seeds, checkpoint: Path | None, mode: str, baseline_dir: Path | None) -> int:
    if checkpoint is None:
        raise UsageFailure("evaluate needs --checkpoint")
    snapshot, meta = load_baseline(baseline_dir or out)
    try:
        net = pn.load_checkpoint(checkpoint)
    except (OSError, pn.CheckpointError) as exc:
        raise UsageFailure(str(exc)) from exc
    for seed in seeds or [0]:
        path = run_evaluation(config, net, snapshot, meta["nu_base"], mode, seed, out)
        print(f"{mode} evaluation -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification


def learning_smoke(out: Path, episodes: int = 50, seeds=(0, 1), echo=print) -> list[vf.CheckResult]:
    """Reduced-scale training comparison of PE-FC, FC and GI-NN."""
    base = cf.ExperimentConfig(
        solver=rs.SolverConfig(nx=40, ny=25, dt=0.01),
        run=cf.RunConfig(seeds=tuple(seeds), episodes=episodes, checkpoint_every=0),
        baseline=cf.BaselineConfig(horizon=300.0, average_window=100.0),
    )
    res = run_baseline(base)
    nu_base = res.nu_base
    echo(f"reduced-scale Nu_base {nu_base:.5f}")
    curves = {}
    for name, kind, pe in (("PE-FC", "FC", True), ("FC", "FC", False), ("GI-NN", "GI_NN", False)):
        cfg = replace(base, network=replace(base.network, trunk_kind=kind), env=replace(base.env, pe_enabled=pe))
        for seed in seeds:
            rows = pt.train(cfg, seed, out / name / f"seed_{seed}", res.state, nu_base).rows
            curves[name, seed] = np.array([r["mean_nu"] for r in rows])
            echo(f"{name} seed {seed}: final mean Nu {curves[name, seed][-1]:.5f}")
    drops = [1.0 - pt.moving_average(curves["PE-FC", s], 10).min() / nu_base for s in seeds]
    best = max(drops)
    r1 = vf.CheckResult("PE-FC 10-episode average below Nu_base", best >= 0.03, best, 0.03, f"best drop {100 * best:.2f}% >= 3%")
    threshold = 0.98 * nu_base

    def first_hit(nu):
        hits = np.flatnonzero(pt.moving_average(nu, 10) <= threshold)
        return int(hits[0]) + 1 if hits.size else math.inf

    wins = 0
    for s in seeds:
        gi, fc = first_hit(curves["GI-NN", s]), first_hit(curves["FC", s])
        wins += gi < math.inf and gi <= fc
    r2 = vf.CheckResult(
        "GI-NN reaches threshold no later than FC", wins >= 1, float(wins), 1.0, f"{wins} of {len(seeds)} seed pairs at Nu <= {threshold:.4f}"
    )
    for r in (r1, r2):
        echo(r.line())
    return [r1, r2]


def cmd_verify(long: bool, quick: bool, flip_mode: str, out: Path) -> int:
    checks = vf.physics_suite(quick=quick) + vf.network_suite(flip_mode=flip_mode, n_pairs=50 if quick else 200)
    results = vf.run_suite(checks)
    if long:
        results += learning_smoke(out / "learning_smoke")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    for r in failed:
        print(f"  failed: {r.name}")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# plotting


def read_csv_columns(path: Path, required: list[str]) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    return {c: [r[c] for r in rows] for c in reader.fieldnames}


def detect_unlearning(moving_avg: np.ndarray, fraction: float = 0.5) -> bool:
    """True when the average climbs back by more than ``fraction`` of its earlier gain."""
    if moving_avg.size < 2:
        return False
    k = int(np.argmin(moving_avg))
    gain = moving_avg[0] - moving_avg[k]
    return bool(gain > 0 and moving_avg[k:].max() - moving_avg[k] > fraction * gain)


def plot_run(run_dir: Path, out: Path) -> tuple[Path, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = sorted(run_dir.glob("seed_*/training.csv"))
    if not logs:
        raise SchemaError(f"{run_dir}: no seed_*/training.csv files")
    series = {}
    for path in logs:
        cols = read_csv_columns(path, pt.TRAINING_LOG_HEADER)
        series[path.parent.name] = np.array(cols["mean_nu"], dtype=np.float64)
    n = min(len(s) for s in series.values())
    mas = {k: pt.moving_average(v) for k, v in series.items()}
    unlearning = any(detect_unlearning(m) for m in mas.values())
    mean_ma = pt.moving_average(np.mean([v[:n] for v in series.values()], axis=0))

    out.mkdir(parents=True, exist_ok=True)
    stem = run_dir.name or "run"
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, v in series.items():
        x = np.arange(1, v.size + 1)
        ax.plot(x, v, alpha=0.25, label=f"{k} instantaneous")
        ax.plot(x, mas[k], linestyle=":", label=f"{k} 25-episode average")
    if not unlearning:
        ax.plot(np.arange(1, n + 1), mean_ma, color="k", label="run average")
    ax.set_xlabel("episode")
    ax.set_ylabel("Nu")
    ax.legend(fontsize=7)
    fig.tight_layout()
    png = out / f"{stem}_learning_curve.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)

    table = out / f"{stem}_learning_curve.csv"
    keys = list(series)
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode"] + [f"{k}_mean_nu" for k in keys] + [f"{k}_moving_avg_25" for k in keys] + ["mean_moving_avg_25", "unlearning"])
        for i in range(n):
            w.writerow(
                [i + 1]
                + [repr(float(series[k][i])) for k in keys]
                + [repr(float(mas[k][i])) for k in keys]
                + ["" if unlearning else repr(float(mean_ma[i])), int(unlearning)]
            )

    for ev in sorted(run_dir.glob("evaluation_*.csv")):
        cols = read_csv_columns(ev, EVAL_HEADER_PREFIX)
        actions = sorted((c for c in cols if c.startswith("action_")), key=lambda c: int(c.split("_")[1]))
        fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
        idx = np.array(cols["actuation_index"], dtype=int)
        axes[0].plot(idx, np.array(cols["nu_global"], dtype=float))
        axes[0].set_ylabel("Nu")
        for c in actions:
            axes[1].plot(idx, np.array(cols[c], dtype=float), lw=0.8)
        axes[1].set_ylabel("action")
        axes[1].set_xlabel("actuation")
        fig.tight_layout()
        fig.savefig(out / f"{stem}_{ev.stem}_actions.png", dpi=120)
        plt.close(fig)
    return png, table


def cmd_plot(run_dirs: list[Path], out: Path) -> int:
    for d in run_dirs:
        png, table = plot_run(d, out)
        print(f"{d} -> {png}, {table}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--seed", type=parse_seeds, help="comma-separated seeds")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rbcmarl", description="MARL control of 2D Rayleigh-Benard convection")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("baseline", parents=[common], help="develop the uncontrolled flow and record Nu_base")
    t = sub.add_parser("train", parents=[common], help="PPO training, one run per seed")
    t.add_argument("--baseline", type=Path, help="directory holding the baseline (default: --out)")
    e = sub.add_parser("evaluate", parents=[common], help="run one episode with a checkpoint")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--mode", choices=["stochastic", "deterministic"], default="deterministic")
    e.add_argument("--baseline", type=Path, help="directory holding the baseline (default: --out)")
    v = sub.add_parser("verify", parents=[common], help="solver physics and network checks")
    v.add_argument("--long", action="store_true", help="also run the reduced-scale learning comparison (hours)")
    v.add_argument("--quick", action="store_true", help="shorter physics checks, no onset bisection")
    v.add_argument("--flip-mode", choices=list(pn.FLIP_MODES), default="physical")
    pl = sub.add_parser("plot", parents=[common], help="learning-curve and action-history figures")
    pl.add_argument("runs", nargs="+", type=Path)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = cf.load(args.config) if args.config else cf.ExperimentConfig()
        if args.command == "baseline":
            return cmd_baseline(config, args.out, args.seed)
        if args.command == "train":
            return cmd_train(config, args.out, args.seed, args.baseline)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.out, args.seed, args.checkpoint, args.mode, args.baseline)
        if args.command == "verify":
            return cmd_verify(args.long, args.quick, args.flip_mode, args.out)
        return cmd_plot(args.runs, args.out)
    except (UsageFailure, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, rs.SnapshotFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
