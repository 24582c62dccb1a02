import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from rbcmarl import config as cf
from rbcmarl import lab_cli
from rbcmarl import ppo_trainer as pt
from rbcmarl import rbc_solver as rs
from rbcmarl.rbc_solver import ConfigurationError


def tiny_config(**solver):
    base = cf.desk_config(seeds=(0, 1), episodes=2)
    return replace(
        base,
        solver=rs.SolverConfig(**{"nx": 20, "ny": 17, "dt": 0.02, **solver}),
        env=replace(base.env, actions_per_episode=3, action_duration=0.2),
        baseline=cf.BaselineConfig(horizon=6.0, average_window=3.0, sample_interval=1.0),
        run=replace(base.run, snapshot_times=(0.4,)),
    )


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    cfg.save(root / "cfg.yaml")
    assert lab_cli.main(["baseline", "--config", str(root / "cfg.yaml"), "--out", str(root / "out")]) == 0
    assert lab_cli.main(["train", "--config", str(root / "cfg.yaml"), "--out", str(root / "out"), "--seed", "0,1"]) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_default_round_trip(self):
        cfg = cf.ExperimentConfig()
        assert cf.loads(cfg.dumps()) == cfg

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(1e3, 1e6),
        st.sampled_from([20, 40, 60]),
        st.floats(0, 1),
        st.sampled_from(["FC", "GI_NN", "GI_CNN"]),
        st.booleans(),
        st.lists(st.integers(0, 1000), min_size=1, max_size=4),
        st.floats(0.05, 0.5),
    )
    def test_round_trip(self, ra, nx, beta, kind, pe, seeds, eps):
        cfg = cf.ExperimentConfig(
            solver=rs.SolverConfig(rayleigh=ra, nx=nx),
            env=replace(cf.ExperimentConfig().env, beta=beta, pe_enabled=pe),
            network=replace(cf.ExperimentConfig().network, trunk_kind=kind),
            ppo=pt.PPOHyper(clip_eps=eps, target_kl=None),
            run=cf.RunConfig(seeds=tuple(seeds)),
        )
        assert cf.loads(cfg.dumps()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="lamda"):
            cf.loads("ppo:\n  lamda: 0.9\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigurationError, match="solvr"):
            cf.loads("solvr:\n  nx: 20\n")

    def test_integer_for_float_field(self):
        assert cf.loads("solver:\n  rayleigh: 20000\n").solver.rayleigh == 20000.0

    def test_inconsistent_probe_shape(self):
        with pytest.raises(ConfigurationError, match="obs_shape"):
            cf.loads("env:\n  probe_columns: 30\n")

    def test_partial_file_uses_defaults(self):
        cfg = cf.loads("network:\n  trunk_kind: GI_CNN\n")
        assert cfg.network.trunk_kind == "GI_CNN" and cfg.solver == rs.SolverConfig()


class TestBaseline:
    def test_subcritical_is_conduction(self, tmp_path):
        cfg = replace(tiny_config(rayleigh=1.0e3), baseline=cf.BaselineConfig(horizon=30.0, average_window=10.0))
        res = lab_cli.run_baseline(cfg)
        assert abs(res.nu_base - 1.0) <= 0.01

    def test_repeatable_and_supercritical(self, trained, tmp_path):
        cfg = cf.load(trained / "cfg.yaml")
        assert lab_cli.main(["baseline", "--config", str(trained / "cfg.yaml"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "baseline.snap").read_bytes() == (trained / "out" / "baseline.snap").read_bytes()
        meta = json.loads((tmp_path / "baseline.json").read_text())
        assert meta["nu_base"] > 1.0
        state = rs.load_snapshot(tmp_path / "baseline.snap")
        assert meta["nu_snapshot"] == rs.nusselt_global(state, cfg.solver)
        assert cf.load(tmp_path / "config.yaml") == cfg


class TestTrain:
    def test_learning_curve_files(self, trained):
        out = trained / "out"
        curves = sorted(p.name for p in out.glob("learning_curve_*.csv"))
        assert curves == ["learning_curve_mean.csv", "learning_curve_seed_0.csv", "learning_curve_seed_1.csv"]
        single = read_rows(out / "learning_curve_seed_0.csv")
        mean = read_rows(out / "learning_curve_mean.csv")
        assert single[0] == lab_cli.LEARNING_CURVE_HEADER and mean[0] == lab_cli.MEAN_CURVE_HEADER
        assert len(mean) - 1 == min(len(read_rows(p)) - 1 for p in out.glob("learning_curve_seed_*.csv"))
        assert {r[1] for r in single[1:]} == {"FC"}
        assert read_rows(out / "seed_0" / "training.csv")[0] == pt.TRAINING_LOG_HEADER

    def test_missing_baseline(self, tmp_path, capsys):
        assert lab_cli.main(["train", "--out", str(tmp_path)]) == 2
        assert "baseline" in capsys.readouterr().err


class TestEvaluate:
    def run(self, trained, tmp_path, mode, seed):
        out = tmp_path / f"{mode}_{seed}"
        args = ["evaluate", "--config", str(trained / "cfg.yaml"), "--out", str(out), "--baseline", str(trained / "out")]
        args += ["--checkpoint", str(trained / "out" / "seed_0" / "final.ckpt"), "--mode", mode, "--seed", str(seed)]
        assert lab_cli.main(args) == 0
        return out / f"evaluation_{mode}_seed_{seed}.csv"

    def test_deterministic_repeatable(self, trained, tmp_path):
        a = self.run(trained, tmp_path / "a", "deterministic", 0)
        b = self.run(trained, tmp_path / "b", "deterministic", 0)
        assert a.read_bytes() == b.read_bytes()
        rows = read_rows(a)
        assert rows[0] == lab_cli.evaluation_header(10) and len(rows) == 4
        snaps = sorted(p.name for p in (a.parent / "snapshots").iterdir())
        assert snaps == ["deterministic_seed_0_t00000.400.csv", "deterministic_seed_0_t00000.400.snap"]

    def test_stochastic_seeds_differ_and_actions_bounded(self, trained, tmp_path):
        a = read_rows(self.run(trained, tmp_path, "stochastic", 1))
        b = read_rows(self.run(trained, tmp_path, "stochastic", 2))
        acts = lambda rows: np.array([r[12:] for r in rows[1:]], dtype=float)
        assert not np.array_equal(acts(a), acts(b))
        assert np.all(np.abs(acts(a)) <= 0.75)

    def test_spec_mismatch(self, trained, tmp_path, capsys):
        cfg = cf.load(trained / "cfg.yaml")
        replace(cfg, network=replace(cfg.network, hidden_width=8)).save(tmp_path / "other.yaml")
        args = ["evaluate", "--config", str(tmp_path / "other.yaml"), "--out", str(tmp_path), "--baseline", str(trained / "out")]
        args += ["--checkpoint", str(trained / "out" / "seed_0" / "final.ckpt")]
        assert lab_cli.main(args) == 2
        assert "does not match" in capsys.readouterr().err


class TestPlot:
    def test_outputs_and_moving_average(self, trained, tmp_path):
        assert lab_cli.main(["plot", str(trained / "out"), "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("*learning_curve.png"))) == 1
        rows = read_rows(tmp_path / "out_learning_curve.csv")
        header, body = rows[0], rows[1:]
        assert header[-1] == "unlearning"
        raw = np.array([r[1] for r in body], dtype=float)
        ma = np.array([r[3] for r in body], dtype=float)
        recomputed = [raw[max(0, i - 24) : i + 1].mean() for i in range(raw.size)]
        np.testing.assert_allclose(ma, recomputed, rtol=0, atol=1e-12)

    def test_unlearning_suppresses_average(self, tmp_path):
        run = tmp_path / "run"
        for seed, series in ((0, np.r_[np.linspace(2.6, 2.2, 30), np.linspace(2.2, 2.7, 30)]), (1, np.linspace(2.6, 2.3, 60))):
            d = run / f"seed_{seed}"
            d.mkdir(parents=True)
            with open(d / "training.csv", "w") as fh:
                fh.write(",".join(pt.TRAINING_LOG_HEADER) + "\n")
                for i, v in enumerate(series, 1):
                    fh.write(f"{i},{v},{v},0,0,0,0\n")
        lab_cli.plot_run(run, tmp_path / "plots")
        rows = read_rows(tmp_path / "plots" / "run_learning_curve.csv")
        assert all(r[-1] == "1" and r[-2] == "" for r in rows[1:])

    def test_detect_unlearning(self):
        assert not lab_cli.detect_unlearning(np.linspace(3, 2, 50))
        assert lab_cli.detect_unlearning(np.r_[np.linspace(3, 2, 25), np.linspace(2, 2.9, 25)])

    def test_missing_columns(self, tmp_path, capsys):
        d = tmp_path / "run" / "seed_0"
        d.mkdir(parents=True)
        (d / "training.csv").write_text("episode,mean_nu\n1,2.0\n")
        assert lab_cli.main(["plot", str(tmp_path / "run"), "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "training.csv" in err and "final_nu" in err


class TestVerifyCommand:
    def test_naive_flip_fails_mirror_coupling(self, tmp_path, capsys):
        assert lab_cli.main(["verify", "--quick", "--flip-mode", "naive", "--out", str(tmp_path)]) == 1
        out = capsys.readouterr().out
        assert "failed: GI_NN mirror coupling" in out and "failed: GI_CNN mirror coupling" in out
        assert "[PASS] GI_NN flip invariance" in out


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        lab_cli.main(["fly"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        lab_cli.main(["train", "--seed", "a,b"])
    assert info.value.code == 2


def test_bad_config_file(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"run": {"episodes": 3, "epsiodes": 4}}))
    assert lab_cli.main(["baseline", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path)]) == 2
