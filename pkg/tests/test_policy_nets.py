import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbcmarl import gradcore as gc
from rbcmarl import marl_env as me
from rbcmarl import policy_nets as pn
from rbcmarl.gradcore import DimensionError, Tensor
from rbcmarl.verify import check_trunk_gradient

LX = 2 * np.pi
SMALL = {"hidden_width": 24, "conv_kernels": 6, "cnn_hidden": 5}


def net_of(kind, seed=0, **kw):
    spec = pn.NetworkSpec(trunk_kind=kind, **{**SMALL, **kw})
    return pn.PolicyNet(spec, seed).randomize(np.random.default_rng(seed))


def obs_batch(seed, n=3, columns=32):
    return np.random.default_rng(seed).normal(size=(n, 3, 8, columns))


class TestFlip:
    @given(st.integers(0, 10_000), st.sampled_from(pn.FLIP_MODES))
    def test_involution(self, seed, mode):
        x = obs_batch(seed, 2)
        np.testing.assert_array_equal(pn.flip_observation(pn.flip_observation(x, mode), mode), x)

    def test_column_constant_without_u_is_fixed(self):
        x = np.repeat(np.random.default_rng(0).normal(size=(3, 8, 1)), 32, axis=2)
        x[1] = 0.0
        np.testing.assert_array_equal(pn.flip_observation(x), x)

    def test_physical_negates_u(self):
        x = np.zeros((3, 8, 32))
        x[1] = np.random.default_rng(1).normal(size=(8, 32))
        flipped = pn.flip_observation(x, "physical")
        np.testing.assert_array_equal(flipped[1], -np.roll(x[1, :, ::-1], 1, axis=-1))
        np.testing.assert_array_equal(pn.flip_observation(x, "naive")[1], -flipped[1])

    def test_reflects_about_centre_column(self):
        x = np.zeros((3, 8, 32))
        x[0, :, 16] = 1.0
        x[0, :, 10] = 2.0
        f = pn.flip_observation(x)
        assert f[0, 0, 16] == 1.0 and f[0, 0, 22] == 2.0

    def test_tensor_version_matches(self):
        x = obs_batch(2)
        for mode in pn.FLIP_MODES:
            np.testing.assert_array_equal(pn.flip_tensor(Tensor(x), mode).values, pn.flip_observation(x, mode))


class TestSpec:
    @pytest.mark.parametrize("kw", [{"trunk_kind": "RNN"}, {"flip_mode": "mirror"}, {"activation": "relu6"}, {"hidden_width": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            pn.NetworkSpec(**kw)

    def test_wrong_observation_shape(self):
        with pytest.raises(DimensionError):
            net_of("FC").forward(np.zeros((1, 3, 8, 30)))


class TestFC:
    def test_trunk_weight_count(self):
        info = pn.parameter_count(pn.PolicyNet(pn.NetworkSpec()))
        assert info["trunk_weights"] == 768 * 512 + 512 * 512 == 655_360

    def test_zero_weights(self):
        net = pn.PolicyNet(pn.NetworkSpec(trunk_kind="FC", **SMALL))
        for p in net.parameters():
            if p is not net.params["pi.log_std"]:
                p.values[...] = 0.0
        out = net.evaluate(obs_batch(0))
        np.testing.assert_array_equal(out.mean, 0.0)
        np.testing.assert_allclose(out.std, np.exp(net.spec.init_log_std))

    def test_not_flip_invariant(self):
        net = net_of("FC", 3)
        x = obs_batch(3, 100)
        gap = np.abs(net.evaluate(x).mean - net.evaluate(pn.flip_observation(x)).mean)
        assert gap.max() > 1e-3

    def test_output_ranges(self):
        out = net_of("FC", 4).evaluate(10 * obs_batch(4, 20))
        assert np.all(np.abs(out.mean) <= 1.0) and np.all(out.std > 0)


class TestGINN:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(pn.FLIP_MODES), st.booleans())
    def test_flip_invariance(self, seed, mode, half):
        net = net_of("GI_NN", seed, flip_mode=mode, ginn_half_scale=half)
        x = obs_batch(seed)
        a, b = net.evaluate(x), net.evaluate(pn.flip_observation(x, mode))
        assert np.max(np.abs(a.mean - b.mean)) <= 1e-9 and np.max(np.abs(a.value - b.value)) <= 1e-9

    def test_self_symmetric_input_doubles_branch(self):
        net = net_of("GI_NN", 1)
        x = obs_batch(1, 2)
        x = 0.5 * (x + pn.flip_observation(x))
        trunk = net.trunk("pi", Tensor(x)).values
        branch = net._fc_branch("pi", Tensor(x.reshape(2, -1))).values
        np.testing.assert_allclose(trunk, 2 * branch, rtol=1e-14)

    def test_differs_from_pre_sum_form(self):
        net = net_of("GI_NN", 2)
        x = obs_batch(2, 5)
        summed = net.trunk("pi", Tensor(x)).values
        pre_sum = net._fc_branch("pi", Tensor((x + pn.flip_observation(x)).reshape(5, -1))).values
        assert np.max(np.abs(summed - pre_sum)) > 1e-3


class TestGICNN:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(pn.FLIP_MODES))
    def test_flip_invariance(self, seed, mode):
        net = net_of("GI_CNN", seed, flip_mode=mode)
        x = obs_batch(seed)
        a, b = net.evaluate(x), net.evaluate(pn.flip_observation(x, mode))
        assert np.max(np.abs(a.mean - b.mean)) <= 1e-9 and np.max(np.abs(a.value - b.value)) <= 1e-9

    def test_orbit_permutes_rather_than_flips_features(self):
        net = net_of("GI_CNN", 5)
        x = obs_batch(5, 2)
        fa = net.conv_features("pi", Tensor(x)).values
        fb = net.conv_features("pi", Tensor(pn.flip_observation(x))).values
        np.testing.assert_allclose(fb[0], fa[1], atol=1e-14)
        np.testing.assert_allclose(fb[1], fa[0], atol=1e-14)
        # feature maps are not simply the flipped maps of the original orbit element
        flipped_maps = np.roll(fa[0][..., ::-1], 1, axis=-1)
        assert np.max(np.abs(fb[0] - flipped_maps)) > 1e-3

    def test_zero_observation_constant_from_biases(self):
        net = net_of("GI_CNN", 6)
        a = net.evaluate(np.zeros((2, 3, 8, 32)))
        p = {k: v.values for k, v in net.params.items()}
        pooled = 2 * np.tanh(p["pi.conv.b"])
        mean = np.tanh(np.tanh(pooled @ p["pi.dense.w"] + p["pi.dense.b"]) @ p["pi.head.w"] + p["pi.head.b"])
        np.testing.assert_allclose(a.mean, mean.ravel()[0], rtol=1e-12)
        assert a.mean[0] == a.mean[1]

    def test_full_size_count_report(self):
        net = pn.PolicyNet(pn.NetworkSpec(trunk_kind="GI_CNN"))
        info = pn.parameter_count(net)
        assert info["layers"]["pi.conv.w"] == 1024 * 27
        assert info["trunk_weights"] == 420_864
        report = pn.format_count_report(net, 420_864)
        assert "420,864" in report and "pi.dense.w" in report


def test_empty_network_count():
    assert pn.parameter_count(None)["total"] == 0


@pytest.mark.parametrize("kind", pn.TRUNK_KINDS)
def test_trunk_gradients(kind):
    assert max(check_trunk_gradient(kind, s) for s in range(5)) <= 1e-4


class TestTrainingSymmetry:
    @pytest.mark.parametrize("kind", ["GI_NN", "GI_CNN"])
    def test_invariance_survives_update(self, kind):
        net = net_of(kind, 7)
        x = obs_batch(7, 4)
        st_ = gc.AdamState.for_params(net.parameters())
        for _ in range(3):
            net.zero_grad()
            m, _, v = net.forward(x)
            gc.backward(gc.add(gc.sum(m), gc.mean(gc.square(v))))
            gc.adam_step(net.parameters(), [p.grad for p in net.parameters()], st_, 0.05)
        a, b = net.evaluate(x), net.evaluate(pn.flip_observation(x))
        assert np.max(np.abs(a.mean - b.mean)) <= 1e-9

    @pytest.mark.parametrize("kind", ["GI_NN", "GI_CNN"])
    def test_step_on_state_moves_mirror_identically(self, kind):
        net = net_of(kind, 8)
        x = obs_batch(8, 1)
        fx = pn.flip_observation(x)
        before = net.evaluate(x).mean, net.evaluate(fx).mean
        net.zero_grad()
        gc.backward(gc.sum(net.forward(x)[0]))
        params = net.parameters()
        gc.adam_step(params, [p.grad for p in params], gc.AdamState.for_params(params), 0.01)
        d_x = net.evaluate(x).mean - before[0]
        d_fx = net.evaluate(fx).mean - before[1]
        assert abs(d_x[0]) > 1e-6 and abs(d_x[0] - d_fx[0]) <= 1e-8

    def test_fc_step_does_not_couple(self):
        net = net_of("FC", 8)
        x = obs_batch(8, 1)
        fx = pn.flip_observation(x)
        before = net.evaluate(x).mean, net.evaluate(fx).mean
        net.zero_grad()
        gc.backward(gc.sum(net.forward(x)[0]))
        params = net.parameters()
        gc.adam_step(params, [p.grad for p in params], gc.AdamState.for_params(params), 0.01)
        assert abs((net.evaluate(x).mean - before[0])[0] - (net.evaluate(fx).mean - before[1])[0]) > 1e-6


class TestPositionalEncodingWrapper:
    def test_zero_amplitude_is_bitwise_fc(self):
        net = net_of("FC", 9)
        raw = obs_batch(9, 1)[0]
        wrapped = pn.wrap_pe(net, me.EnvConfig(pe_enabled=True, pe_amplitude=0.0), LX)
        for i in (None, 3):
            view = raw if i is None else me.recenter(raw, i, me.EnvConfig())
            np.testing.assert_array_equal(wrapped.evaluate(raw, i).mean, net.evaluate(view).mean)

    def test_breaks_raw_flip_invariance(self):
        net = net_of("GI_NN", 10)
        wrapped = pn.wrap_pe(net, me.EnvConfig(pe_enabled=True), LX)
        raw = obs_batch(10, 1)[0]
        assert abs(wrapped.evaluate(raw).mean[0] - wrapped.evaluate(pn.flip_observation(raw)).mean[0]) > 1e-6

    def test_invariant_under_flip_with_encoding_sign_flip(self):
        net = net_of("GI_NN", 11)
        raw = obs_batch(11, 1)[0]
        plus = pn.wrap_pe(net, me.EnvConfig(pe_enabled=True, pe_amplitude=0.8), LX)
        minus = pn.wrap_pe(net, me.EnvConfig(pe_enabled=True, pe_amplitude=-0.8), LX)
        a = plus.evaluate(raw).mean
        b = minus.evaluate(pn.flip_observation(raw)).mean
        assert abs(a[0] - b[0]) <= 1e-12


class TestAct:
    def out(self, std=0.3):
        return pn.PolicyOutput(np.array([0.2, -0.5, 0.9]), np.full(3, std), np.zeros(3))

    def test_deterministic_ignores_rng(self):
        a1, _, lp = pn.act(self.out(), "deterministic", np.random.default_rng(0))
        a2, _, _ = pn.act(self.out(), "deterministic", np.random.default_rng(1))
        np.testing.assert_array_equal(a1, a2)
        assert lp is None

    def test_small_std_returns_mean(self):
        a, _, _ = pn.act(self.out(1e-12), "stochastic", np.random.default_rng(0))
        np.testing.assert_allclose(a, [0.2, -0.5, 0.9], atol=1e-10)

    def test_monte_carlo_mean(self):
        out = pn.PolicyOutput(np.full(100_000, 0.1), np.full(100_000, 0.4), np.zeros(100_000))
        _, sample, lp = pn.act(out, "stochastic", np.random.default_rng(2))
        assert abs(sample.mean() - 0.1) <= 3 * 0.4 / np.sqrt(1e5)
        assert lp.shape == sample.shape

    def test_clipped_action_keeps_pre_clip_density(self):
        out = pn.PolicyOutput(np.array([0.99]), np.array([1.0]), np.zeros(1))
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, s, lp = pn.act(out, "stochastic", rng)
            assert -1 <= a[0] <= 1
            assert lp[0] == pytest.approx(-0.5 * (s[0] - 0.99) ** 2 - 0.5 * np.log(2 * np.pi))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            pn.act(self.out(), "greedy")


class TestCheckpoint:
    @pytest.mark.parametrize("kind", pn.TRUNK_KINDS)
    def test_round_trip_bit_exact(self, tmp_path, kind):
        net = net_of(kind, 12)
        pn.save_checkpoint(net, tmp_path / "n.ckpt")
        back = pn.load_checkpoint(tmp_path / "n.ckpt")
        assert back.spec == net.spec and back.seed == net.seed
        for k in net.params:
            np.testing.assert_array_equal(back.params[k].values, net.params[k].values)

    def test_bad_files(self, tmp_path):
        net = net_of("FC", 13)
        pn.save_checkpoint(net, tmp_path / "n.ckpt")
        raw = (tmp_path / "n.ckpt").read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(pn.CheckpointError):
            pn.load_checkpoint(tmp_path / "bad.ckpt")
        (tmp_path / "cut.ckpt").write_bytes(raw[:-16])
        with pytest.raises(pn.CheckpointError, match="truncated"):
            pn.load_checkpoint(tmp_path / "cut.ckpt")
        (tmp_path / "ver.ckpt").write_bytes(raw[:8] + (7).to_bytes(4, "little") + raw[12:])
        with pytest.raises(pn.CheckpointError, match="version"):
            pn.load_checkpoint(tmp_path / "ver.ckpt")


def test_log_std_is_bounded():
    net = net_of("FC", 14)
    net.params["pi.log_std"].values[:] = 10.0
    assert net.evaluate(obs_batch(0, 1)).std[0] == pytest.approx(np.exp(2.0))
    net.params["pi.log_std"].values[:] = -10.0
    assert net.evaluate(obs_batch(0, 1)).std[0] == pytest.approx(np.exp(-5.0))


def test_actor_and_critic_are_separate():
    net = net_of("FC", 15)
    x = obs_batch(15, 2)
    v0 = net.evaluate(x).value
    net.params["pi.fc0.w"].values += 1.0
    np.testing.assert_array_equal(net.evaluate(x).value, v0)
