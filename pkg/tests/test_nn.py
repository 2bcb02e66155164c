import numpy as np
import numpy.testing as npt
import pytest

import loadcast as lc
from loadcast import Tensor, grad_check
from loadcast.errors import NumericError, ShapeError
from loadcast.nn import BatchNormState, GRUWeights


def conv2d_oracle(x, k, stride):
    """Direct six-nested-loop cross-correlation with zero padding of 1."""
    c_in, h, w = x.shape
    c_out = k.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            acc += k[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_zero_input_zero_output(self, rng):
        k = Tensor(rng.standard_normal((3, 2, 3, 3)))
        out = lc.conv2d(Tensor(np.zeros((2, 6, 7))), k)
        npt.assert_array_equal(out.data, 0.0)

    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((1, 3, 3))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = lc.conv2d(Tensor(x), Tensor(k), stride=1)
        npt.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive_oracle(self, rng, stride):
        x = rng.standard_normal((2, 5, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        out = lc.conv2d(Tensor(x), Tensor(k), stride=stride)
        npt.assert_allclose(out.data, conv2d_oracle(x, k, stride), atol=1e-12, rtol=0)

    def test_stride2_output_shape_is_ceil(self, rng):
        out = lc.conv2d(Tensor(rng.standard_normal((1, 9, 24))),
                        Tensor(rng.standard_normal((4, 1, 3, 3))), stride=2)
        assert out.shape == (4, 5, 12)

    def test_batched_equals_per_sample(self, rng):
        x = rng.standard_normal((3, 2, 4, 5))
        k = rng.standard_normal((2, 2, 3, 3))
        batched = lc.conv2d(Tensor(x), Tensor(k)).data
        for i in range(3):
            # contraction order differs between batch shapes, so not bitwise
            npt.assert_allclose(batched[i], lc.conv2d(Tensor(x[i]), Tensor(k)).data,
                                atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="channel"):
            lc.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_bad_kernel_size(self):
        with pytest.raises(ShapeError):
            lc.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_bad_stride(self):
        with pytest.raises(ShapeError):
            lc.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                      stride=3)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, stride):
        for seed in range(5):
            r = np.random.default_rng(seed)
            x = r.standard_normal((2, 4, 5))
            k = r.standard_normal((3, 2, 3, 3))
            assert grad_check(lambda t: lc.conv2d(t, Tensor(k), stride).sum(),
                              Tensor(x)) < 1e-6
            assert grad_check(lambda t: lc.conv2d(Tensor(x), t, stride).sum(),
                              Tensor(k)) < 1e-6


class TestPointwiseConv:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_einsum(self, rng, stride):
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3))
        out = lc.pointwise_conv(Tensor(x), Tensor(w), stride)
        expect = np.einsum("bchw,oc->bohw", x[:, :, ::stride, ::stride], w)
        npt.assert_allclose(out.data, expect, atol=1e-14)

    def test_gradients(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2))
        assert grad_check(lambda t: (lc.pointwise_conv(t, Tensor(w), 2) ** 2).sum(),
                          Tensor(x)) < 1e-6
        assert grad_check(lambda t: (lc.pointwise_conv(Tensor(x), t, 2) ** 2).sum(),
                          Tensor(w)) < 1e-6


class TestBatchNorm:
    def test_constant_channel_maps_to_beta(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        beta = np.array([1.0, -2.0, 0.5])
        out = lc.batchnorm2d(x, Tensor(np.ones(3)), Tensor(beta),
                             BatchNormState.zeros(3), training=True)
        npt.assert_allclose(out.data, np.broadcast_to(beta[:, None, None], (2, 3, 4, 4)),
                            atol=1e-6)

    def test_train_mode_normalizes(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
        out = lc.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                             BatchNormState.zeros(3), training=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-10
        npt.assert_allclose(var, 1.0, atol=1e-4)  # eps shrinks variance slightly

    def test_running_stats_updated_and_used_in_eval(self, rng):
        state = BatchNormState.zeros(2)
        x = rng.standard_normal((3, 2, 4, 4)) + 5.0
        lc.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
        mu = x.mean(axis=(0, 2, 3))
        npt.assert_allclose(state.running_mean, 0.9 * 0.0 + 0.1 * mu, rtol=1e-12)
        out = lc.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                             state, training=False)
        expect = (x - state.running_mean[:, None, None]) / np.sqrt(
            state.running_var[:, None, None] + state.eps)
        npt.assert_allclose(out.data, expect, rtol=1e-12)

    def test_gradients_train_mode(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        g = rng.standard_normal(3) + 1.0
        b = rng.standard_normal(3)

        def run(t, gamma, beta, state):
            return (lc.batchnorm2d(t, gamma, beta, state, True) ** 2).sum()

        assert grad_check(lambda t: run(t, Tensor(g), Tensor(b),
                                        BatchNormState.zeros(3)), Tensor(x)) < 1e-5
        assert grad_check(lambda t: run(Tensor(x), t, Tensor(b),
                                        BatchNormState.zeros(3)), Tensor(g)) < 1e-6
        assert grad_check(lambda t: run(Tensor(x), Tensor(g), t,
                                        BatchNormState.zeros(3)), Tensor(b)) < 1e-6

    def test_gradients_eval_mode(self, rng):
        state = BatchNormState(rng.standard_normal(2), rng.random(2) + 0.5)
        x = rng.standard_normal((2, 2, 3, 3))
        assert grad_check(
            lambda t: (lc.batchnorm2d(t, Tensor(np.full(2, 1.3)), Tensor(np.zeros(2)),
                                      state, False) ** 2).sum(), Tensor(x)) < 1e-6

    def test_too_few_values_rejected(self):
        with pytest.raises(ShapeError):
            lc.batchnorm2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)),
                           Tensor(np.zeros(2)), BatchNormState.zeros(2), True)

    def test_zero_variance_never_divides_by_zero(self):
        out = lc.batchnorm2d(Tensor(np.ones((2, 1, 2, 2))), Tensor(np.ones(1)),
                             Tensor(np.zeros(1)), BatchNormState.zeros(1), True)
        assert np.isfinite(out.data).all()


class TestLayerNorm:
    def test_rows_standardized_pre_affine(self, rng):
        x = Tensor(rng.standard_normal((5, 8)) * 4 + 3)
        out = lc.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        npt.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        npt.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)

    def test_gradients(self, rng):
        x = rng.standard_normal((3, 6))
        g = rng.standard_normal(6) + 1.0
        b = rng.standard_normal(6)
        assert grad_check(lambda t: (lc.layer_norm(t, Tensor(g), Tensor(b)) ** 2).sum(),
                          Tensor(x)) < 1e-5
        assert grad_check(lambda t: (lc.layer_norm(Tensor(x), t, Tensor(b)) ** 2).sum(),
                          Tensor(g)) < 1e-6


class TestLinear:
    def test_value_and_grad(self, rng):
        x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
        out = lc.linear(Tensor(x), Tensor(w), Tensor(b))
        npt.assert_allclose(out.data, x @ w + b, rtol=1e-14)
        assert grad_check(lambda t: lc.linear(Tensor(x), t, Tensor(b)).sum(),
                          Tensor(w)) < 1e-7


def make_gru_weights(rng, d_in, hidden, scale=0.5):
    def w(*shape):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    return GRUWeights(w_z=w(d_in, hidden), u_z=w(hidden, hidden), b_z=w(hidden),
                      w_r=w(d_in, hidden), u_r=w(hidden, hidden), b_r=w(hidden),
                      w_c=w(d_in, hidden), u_c=w(hidden, hidden), b_c=w(hidden))


def gru_cell_oracle(x_t, h, w):
    """One recurrence step computed directly with numpy."""
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    z = sig(x_t @ w.w_z.data + h @ w.u_z.data + w.b_z.data)
    r = sig(x_t @ w.w_r.data + h @ w.u_r.data + w.b_r.data)
    c = np.tanh(x_t @ w.w_c.data + (r * h) @ w.u_c.data + w.b_c.data)
    return (1.0 - z) * h + z * c


class TestGRU:
    def test_zero_weights_zero_h0_gives_zero_states(self):
        w = GRUWeights(*[Tensor(np.zeros(s)) for s in
                         [(3, 4), (4, 4), (4,)] * 3])
        out = lc.gru_sequence(Tensor(np.ones((5, 3))), Tensor(np.zeros(4)), w)
        npt.assert_array_equal(out.data, np.zeros((5, 4)))

    def test_single_step_equals_cell(self, rng):
        w = make_gru_weights(rng, 3, 4)
        x = rng.standard_normal((1, 3))
        out = lc.gru_sequence(Tensor(x), Tensor(np.zeros(4)), w)
        npt.assert_allclose(out.data[0], gru_cell_oracle(x[0], np.zeros(4), w),
                            rtol=1e-12)

    def test_recurrence_matches_oracle(self, rng):
        w = make_gru_weights(rng, 3, 5)
        x = rng.standard_normal((6, 3))
        out = lc.gru_sequence(Tensor(x), Tensor(np.zeros(5)), w).data
        h = np.zeros(5)
        for t in range(6):
            h = gru_cell_oracle(x[t], h, w)
            npt.assert_allclose(out[t], h, rtol=1e-12)

    def test_batched_equals_loop(self, rng):
        w = make_gru_weights(rng, 3, 4)
        x = rng.standard_normal((2, 5, 3))
        batched = lc.gru_sequence(Tensor(x), Tensor(np.zeros(4)), w).data
        for i in range(2):
            single = lc.gru_sequence(Tensor(x[i]), Tensor(np.zeros(4)), w).data
            npt.assert_allclose(batched[i], single, rtol=1e-12)

    def test_input_gradient_vs_finite_differences(self, rng):
        w = make_gru_weights(rng, 3, 5)
        x = rng.standard_normal((4, 3))
        assert grad_check(lambda t: lc.gru_sequence(t, Tensor(np.zeros(5)), w).sum(),
                          Tensor(x)) < 1e-5

    def test_weight_gradients(self, rng):
        w = make_gru_weights(rng, 2, 3)
        x = Tensor(rng.standard_normal((3, 2)))

        def loss():
            return (lc.gru_sequence(x, Tensor(np.zeros(3)), w) ** 2).sum()

        assert lc.grad_check_params(loss, w.tensors()) < 1e-5

    def test_non_finite_state_reports_step(self, rng):
        w = make_gru_weights(rng, 2, 3)
        x = np.ones((4, 2))
        x[2, 0] = np.nan
        with pytest.raises(NumericError, match="step 2"):
            lc.gru_sequence(Tensor(x), Tensor(np.zeros(3)), w)

    def test_empty_sequence_rejected(self, rng):
        w = make_gru_weights(rng, 2, 3)
        with pytest.raises(ShapeError):
            lc.gru_sequence(Tensor(np.zeros((0, 2))), Tensor(np.zeros(3)), w)
