import time

import numpy as np
import pytest

from conftest import check_grad, small_model
from posetcn.complexity import estimate
from posetcn.errors import ConfigError, ShapeError, TemporalExtentError
from posetcn.model import ModelConfig, TemporalModel, build, flip_permutation, flip_poses, pad_sequence, predict_sequence
from posetcn.skeleton import H36M_17


def probe_dependencies(model, t, out_index):
    """Input frames whose perturbation changes output frame ``out_index``."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, model.config.num_joints * 2, t)).astype(np.float32)
    base = model.forward(x)[:, :, out_index]
    deps = []
    for f in range(t):
        xp = x.copy()
        xp[:, :, f] += 1.0
        if not np.array_equal(model.forward(xp)[:, :, out_index], base):
            deps.append(f)
    return deps


def symmetrize(model, perm):
    """Make ``model`` exactly mirror-equivariant so flip averaging is a no-op."""
    sign_in = np.array([-1.0, 1.0])
    sign_out = np.array([-1.0, 1.0, 1.0])
    w = model.expand.weight.value
    c, _, k = w.shape
    w4 = w.reshape(c, -1, 2, k)
    w[...] = ((w4 + w4[:, perm] * sign_in[None, None, :, None]) / 2).reshape(w.shape)
    s = model.shrink_w.value
    s4 = s.reshape(-1, 3, s.shape[1], 1)
    s[...] = ((s4 + s4[perm] * sign_out[None, :, None, None]) / 2).reshape(s.shape)
    b = model.shrink_b.value.reshape(-1, 3)
    b[...] = (b + b[perm] * sign_out) / 2


class TestConfig:
    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(kernel_width=4)

    def test_bad_dropout(self):
        with pytest.raises(ConfigError):
            ModelConfig(dropout_p=1.0)

    @pytest.mark.parametrize("blocks,rf", [(0, 3), (1, 9), (2, 27), (3, 81), (4, 243)])
    def test_receptive_field_is_power_of_three(self, blocks, rf):
        assert ModelConfig(blocks=blocks).receptive_field == rf == 3 ** (blocks + 1)

    def test_single_frame_baseline(self):
        assert ModelConfig(blocks=0, kernel_width=1).receptive_field == 1

    def test_dict_round_trip(self):
        cfg = ModelConfig(blocks=3, causal=True, num_joints_out=1)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"blocks": 2, "bogus": 1})


class TestBuild:
    def test_parameter_count_27f(self):
        model = build(ModelConfig(), 0)
        assert model.num_parameters() == 8_555_571
        assert round(model.num_parameters() / 1e6, 2) == 8.56

    def test_parameter_count_243f(self):
        cfg = ModelConfig(blocks=4)
        assert round(estimate(cfg).total_params / 1e6, 2) == 16.95

    def test_estimator_matches_stored_floats(self):
        for cfg in (ModelConfig(channels=64), ModelConfig(channels=32, blocks=3, dense_mode=True),
                    ModelConfig(channels=16, blocks=0, kernel_width=1)):
            assert TemporalModel(cfg).num_parameters() == estimate(cfg).total_params

    def test_seeded_initialization(self):
        a, b, c = small_model(3), small_model(3), small_model(4)
        for k, v in a.state_dict().items():
            assert np.array_equal(v, b.state_dict()[k])
        assert not np.array_equal(a.expand.weight.value, c.expand.weight.value)

    def test_channel_plumbing(self):
        m = small_model(channels=16)
        assert m.expand.weight.value.shape == (16, 6, 3)
        for wide, narrow in m.blocks:
            assert wide.weight.value.shape == (16, 16, 3)
            assert narrow.weight.value.shape == (16, 16, 1)
        assert m.shrink_w.value.shape == (9, 16, 1)

    def test_state_dict_shape_mismatch(self):
        state = small_model().state_dict()
        state["shrink.bias"] = np.zeros(2, np.float32)
        with pytest.raises(ShapeError):
            small_model().load_state_dict(state)


class TestForward:
    def test_rf_input_gives_one_frame(self):
        m = small_model()
        assert m.forward(np.zeros((2, 6, 27), np.float32)).shape == (2, 9, 1)

    def test_output_length(self):
        m = small_model()
        assert m.forward(np.zeros((1, 6, 100), np.float32)).shape[2] == 74

    def test_too_short(self):
        with pytest.raises(TemporalExtentError, match="insufficient temporal extent"):
            small_model().forward(np.zeros((1, 6, 26), np.float32))

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            small_model().forward(np.zeros((1, 5, 27), np.float32))

    @pytest.mark.parametrize("causal", [False, True])
    def test_receptive_field_probe(self, causal):
        m = small_model(causal=causal)
        t, out_index = 40, 5
        assert probe_dependencies(m, t, out_index) == list(range(out_index, out_index + 27))

    def test_causal_ignores_future(self, rng):
        m = small_model(causal=True)
        x = rng.normal(size=(1, 6, 60)).astype(np.float32)
        base = m.forward(x)
        # output i is aligned to input frame i + RF - 1
        for i in (0, 10, 33):
            xp = x.copy()
            xp[:, :, i + 27:] = rng.normal(size=xp[:, :, i + 27:].shape)
            assert np.array_equal(m.forward(xp)[:, :, i], base[:, :, i])

    def test_dense_mode_same_receptive_field(self):
        m = small_model(dense_mode=True)
        assert probe_dependencies(m, 30, 2) == list(range(2, 29))


class TestStrided:
    @pytest.mark.parametrize("causal", [False, True])
    @pytest.mark.parametrize("blocks", [1, 2, 3])
    def test_matches_forward(self, rng, causal, blocks):
        m = small_model(seed=int(rng.integers(1000)), causal=causal, blocks=blocks)
        for u in m._units():
            u.bn.running_mean[:] = rng.normal(size=u.bn.channels)
            u.bn.running_var[:] = rng.uniform(0.5, 2, u.bn.channels)
        x = rng.normal(size=(4, 6, m.receptive_field)).astype(np.float32)
        a, b = m.forward(x), m.forward_strided_single(x)
        np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-6)

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            small_model().forward_strided_single(np.zeros((1, 6, 28), np.float32))

    def test_zero_weights_give_bias(self):
        m = small_model()
        for p in m.parameters():
            if p.name != "shrink.bias":
                p.value[...] = 0
        m.shrink_b.value[:] = np.arange(9)
        out = m.forward_strided_single(np.zeros((2, 6, 27), np.float32))
        np.testing.assert_array_equal(out[:, :, 0], np.tile(np.arange(9, dtype=np.float32), (2, 1)))

    def test_strided_step_is_faster(self):
        m = TemporalModel(ModelConfig(channels=256, dropout_p=0.0), 0)
        x = np.random.default_rng(0).normal(size=(64, 34, 27)).astype(np.float32)

        def best(fn):
            times = []
            for _ in range(5):
                t0 = time.perf_counter()
                out = fn(x, training=True, record=True)
                m.backward(np.ones_like(out))
                times.append(time.perf_counter() - t0)
            return min(times)

        assert best(m.forward_strided_single) < best(m.forward)


class TestBackward:
    @pytest.mark.parametrize("strided,causal", [(False, False), (False, True), (True, False), (True, True)])
    def test_finite_differences(self, rng, strided, causal):
        m = small_model(1, causal=causal).astype(np.float64)
        t = 27 if strided else 31
        x = rng.normal(size=(3, 6, t))
        run = m.forward_strided_single if strided else m.forward
        out = run(x, training=True, record=True)
        g = rng.normal(size=out.shape)
        m.zero_grad()
        gx = m.backward(g)

        def loss():
            keep = [(u.bn.running_mean.copy(), u.bn.running_var.copy()) for u in m._units()]
            val = float((run(x, training=True, record=False) * g).sum())
            for u, (mu, var) in zip(m._units(), keep):
                u.bn.running_mean[:], u.bn.running_var[:] = mu, var
            return val

        for p in m.parameters():
            assert check_grad(loss, p.value, p.grad, rng, n=4) < 1e-3, p.name
        assert check_grad(loss, x, gx, rng, n=10) < 1e-3

    def test_backward_requires_record(self):
        m = small_model()
        m.forward(np.zeros((1, 6, 27), np.float32))
        with pytest.raises(RuntimeError):
            m.backward(np.zeros((1, 9, 1), np.float32))


class TestPredictSequence:
    def test_constant_input_constant_output(self):
        m = small_model()
        kp = np.tile(np.random.default_rng(0).normal(size=(1, 3, 2)), (40, 1, 1))
        out = predict_sequence(m, kp)
        np.testing.assert_allclose(out, np.broadcast_to(out[:1], out.shape), atol=1e-6)

    @pytest.mark.parametrize("t", [1, 2, 13, 27, 50])
    @pytest.mark.parametrize("causal", [False, True])
    def test_length_preserved(self, t, causal):
        m = small_model(causal=causal)
        out = predict_sequence(m, np.zeros((t, 3, 2)))
        assert out.shape == (t, 3, 3)

    def test_causal_padding_is_left_only(self):
        m = small_model(causal=True)
        padded = pad_sequence(np.arange(5.0)[:, None, None], m)
        assert padded.shape[0] == 5 + 26 and padded[-1, 0, 0] == 4 and (padded[:27, 0, 0] == 0).all()

    def test_joint_mismatch(self):
        with pytest.raises(ShapeError):
            predict_sequence(small_model(), np.zeros((10, 4, 2)))

    def test_flip_is_noop_on_symmetric_model_and_pose(self):
        perm = flip_permutation(17, H36M_17.left_right_pairs)
        m = TemporalModel(ModelConfig(channels=32, dropout_p=0.0), 2)
        symmetrize(m, perm)
        rng = np.random.default_rng(0)
        half = rng.normal(0, 0.1, size=(30, 17, 2))
        pose = half.copy()
        for l, r in H36M_17.left_right_pairs:
            pose[:, r] = half[:, l] * [-1, 1]
        for j in (0, 7, 8, 9, 10):
            pose[:, j, 0] = 0.0  # spine on the mirror axis
        np.testing.assert_allclose(flip_poses(pose, perm), pose)
        plain = predict_sequence(m, pose)
        flipped = predict_sequence(m, pose, True, H36M_17.left_right_pairs)
        np.testing.assert_allclose(flipped, plain, atol=1e-4)

    def test_flip_averages_unflipped_prediction(self, rng):
        m = small_model()
        pairs = ((1, 2),)
        kp = rng.normal(size=(10, 3, 2))
        perm = flip_permutation(3, pairs)
        expected = (predict_sequence(m, kp) + flip_poses(predict_sequence(m, flip_poses(kp, perm)), perm)) / 2
        np.testing.assert_allclose(predict_sequence(m, kp, True, pairs), expected, atol=1e-6)

    def test_single_joint_output(self):
        m = small_model(num_joints_out=1)
        assert predict_sequence(m, np.zeros((5, 3, 2)), True, ((1, 2),)).shape == (5, 1, 3)
