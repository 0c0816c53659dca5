import numpy as np
import pytest

from blindspeckle import tensor as T
from blindspeckle.gradcheck import check_gradients
from blindspeckle.tensor import NormStats, Tape, Tensor, backward


def naive_conv(x, w, pad):
    top, bottom, left, right = pad
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    n, c, hp, wp = xp.shape
    o, _, k, _ = w.shape
    out = np.zeros((n, o, hp - k + 1, wp - k + 1))
    for b in range(n):
        for oc in range(o):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    out[b, oc, i, j] = np.sum(xp[b, :, i : i + k, j : j + k] * w[oc])
    return out


def naive_nonlocal(x, wt, wp, wg, q):
    n, c, h, w = x.shape
    r = q // 2
    out = x.copy()
    for b in range(n):
        for i in range(h):
            for j in range(w):
                xi = x[b, :, i, j]
                weights, vals = [], []
                for a in range(-r, r + 1):
                    for d in range(-r, r + 1):
                        ii, jj = i + a, j + d
                        if a > 0 or not (0 <= ii < h and 0 <= jj < w):
                            continue
                        xp = x[b, :, ii, jj]
                        weights.append(np.exp(min((xi @ wt) @ (xp @ wp), 40.0)))
                        vals.append(xp @ wg)
                weights = np.array(weights) / np.sum(weights)
                out[b, :, i, j] += weights @ np.array(vals)
    return out


def rand(*shape, seed=0, requires_grad=True):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=requires_grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = rand(2, 3, 5, 4)
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_array_equal(T.conv2d(x, w).data, x.data)

    def test_sum_filter(self):
        x = Tensor(np.full((1, 1, 5, 5), 2.5))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 0, 2, 2] == 9 * 2.5

    @pytest.mark.parametrize("pad", [(1, 1, 1, 1), (2, 0, 1, 1), (0, 0, 0, 0), (3, 1, 0, 2)])
    def test_matches_naive(self, pad):
        x = rand(2, 3, 5, 7, seed=1).data
        w = rand(4, 3, 3, 3, seed=2).data
        got = T.conv2d(Tensor(x), Tensor(w), padding=pad).data
        np.testing.assert_allclose(got, naive_conv(x, w, pad), atol=1e-12, rtol=0)

    def test_output_size(self):
        x = rand(1, 1, 6, 9)
        out = T.conv2d(x, rand(1, 1, 3, 3), padding=(2, 0, 1, 1))
        assert out.shape == (1, 1, 6, 9)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv2d(rand(1, 2, 5, 5), rand(1, 3, 3, 3))

    def test_gradients(self):
        x, w, b = rand(2, 3, 6, 5, seed=3), rand(4, 3, 3, 3, seed=4), rand(4, seed=5)
        r = rand(2, 4, 6, 5, seed=6, requires_grad=False)
        fn = lambda: T.sum_all(T.mul(T.conv2d(x, w, padding=(2, 0, 1, 1), bias=b), r))
        rep = check_gradients(fn, [x, w, b], n_probes=10, seed=1)
        assert rep.max_rel_error <= 1e-4


class TestLeakyRelu:
    def test_positive(self):
        assert T.leaky_relu(Tensor(np.array(2.0)), 0.1).data == 2.0

    def test_negative(self):
        assert T.leaky_relu(Tensor(np.array(-2.0)), 0.1).data == pytest.approx(-0.2)

    def test_gradient_at_minus_three(self):
        x = Tensor(np.array([-3.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.leaky_relu(x, 0.1))
        backward(loss, tape)
        h = 1e-6
        fd = (T.leaky_relu(Tensor(np.array([-3 + h])), 0.1).data - T.leaky_relu(Tensor(np.array([-3 - h])), 0.1).data) / (2 * h)
        assert x.grad[0] == pytest.approx(0.1, abs=1e-12)
        assert x.grad[0] == pytest.approx(fd[0], abs=1e-8)

    def test_subgradient_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.leaky_relu(x, 0.2))
        backward(loss, tape)
        assert x.grad[0] == 0.2

    def test_slope_range(self):
        with pytest.raises(ValueError):
            T.leaky_relu(rand(3), 1.5)


class TestNormLayer:
    def _params(self, c, dtype=np.float64):
        return NormStats(c, dtype=dtype), Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True)

    def test_eval_identity(self):
        st, s, o = self._params(3)
        x = rand(2, 3, 4, 4)
        np.testing.assert_allclose(T.norm_layer(x, st, s, o, "eval").data, x.data / np.sqrt(1 + 1e-5))

    def test_constant_channel(self):
        st, s, _ = self._params(2)
        off = Tensor(np.array([0.5, -1.0]))
        out = T.norm_layer(Tensor(np.full((2, 2, 3, 3), 7.0)), st, s, off, "train")
        np.testing.assert_allclose(out.data[:, 0], 0.5, atol=1e-12)
        np.testing.assert_allclose(out.data[:, 1], -1.0, atol=1e-12)
        assert np.all(np.isfinite(out.data))

    def test_train_statistics(self):
        st, s, o = self._params(4)
        x = Tensor(np.random.default_rng(2).normal(3.0, 2.0, (5, 4, 6, 6)))
        out = T.norm_layer(x, st, s, o, "train").data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_update(self):
        st, s, o = self._params(1)
        x = Tensor(np.random.default_rng(3).normal(2.0, 1.0, (4, 1, 5, 5)))
        T.norm_layer(x, st, s, o, "train")
        assert st.mean[0] == pytest.approx(0.1 * x.data.mean())
        assert st.var[0] == pytest.approx(0.9 + 0.1 * x.data.var(ddof=1))

    def test_eval_frozen(self):
        st, s, o = self._params(2)
        before = st.mean.copy()
        T.norm_layer(rand(2, 2, 3, 3), st, s, o, "eval")
        np.testing.assert_array_equal(before, st.mean)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, mode):
        st, _, _ = self._params(3)
        st.mean[:] = [0.2, -0.1, 0.3]
        st.var[:] = [1.5, 0.7, 2.0]
        x = rand(2, 3, 4, 5, seed=8)
        s = Tensor(np.array([1.2, 0.8, -0.5]), requires_grad=True)
        o = Tensor(np.array([0.1, 0.2, 0.3]), requires_grad=True)
        r = rand(2, 3, 4, 5, seed=9, requires_grad=False)
        st.momentum = 0.0 if mode == "train" else st.momentum
        fn = lambda: T.sum_all(T.mul(T.norm_layer(x, st, s, o, mode), r))
        rep = check_gradients(fn, [x, s, o], n_probes=10, seed=2)
        assert rep.max_rel_error <= 1e-4

    def test_channel_mismatch(self):
        st, s, o = self._params(2)
        with pytest.raises(ValueError):
            T.norm_layer(rand(1, 3, 2, 2), st, s, o)


class TestBackward:
    def test_sum_gives_ones(self):
        x = rand(3, 4)
        with Tape() as tape:
            loss = T.sum_all(x)
        g = backward(loss, tape)
        np.testing.assert_array_equal(g[x], np.ones((3, 4)))

    def test_half_square(self):
        x = rand(2, 5)
        with Tape() as tape:
            loss = T.mul(T.sum_all(T.mul(x, x)), 0.5)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, x.data)

    def test_non_scalar(self):
        x = rand(2, 2)
        with Tape() as tape:
            y = T.mul(x, 2.0)
        with pytest.raises(ValueError):
            backward(y, tape)

    def test_linear_tape(self):
        x = rand(4)
        with Tape() as tape:
            y = x
            for _ in range(50):
                y = T.add(y, 1.0)
            loss = T.sum_all(y)
        assert len(tape) == 51
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_no_tape_no_record(self):
        x = rand(3)
        y = T.mul(x, 2.0)
        assert not y.requires_grad

    def test_shared_input_accumulates(self):
        x = rand(3)
        with Tape() as tape:
            loss = T.sum_all(T.add(T.mul(x, 2.0), T.mul(x, 3.0)))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 5.0)


class TestIndexRemaps:
    def test_rot90_convention(self):
        x = Tensor(np.array([[1, 2], [3, 4]]).reshape(1, 1, 2, 2))
        np.testing.assert_array_equal(T.rot90(x, 1).data[0, 0], [[2, 4], [1, 3]])

    def test_translate(self):
        x = np.zeros((1, 1, 6, 5))
        x[0, 0, 1, 2] = 1.0
        out = T.translate(Tensor(x), 2, 0).data
        assert out[0, 0, 3, 2] == 1.0 and out.sum() == 1.0
        assert np.all(out[0, 0, :2] == 0)

    def test_translate_drops_content(self):
        x = np.ones((1, 1, 4, 4))
        out = T.translate(Tensor(x), 1, -1).data[0, 0]
        assert out[0].sum() == 0 and out[:, -1].sum() == 0 and out[1:, :-1].sum() == 9

    @pytest.mark.parametrize(
        "op",
        [
            lambda x: T.rot90(x, 1),
            lambda x: T.rot90(x, 3),
            lambda x: T.translate(x, 2, -1),
            lambda x: T.pad2d(x, 1, 0, 2, 1),
            lambda x: T.crop2d(x, 1, 0, 0, 2),
            lambda x: T.channel(x, 1),
            lambda x: T.concat([x, T.mul(x, 2.0)], axis=1),
            lambda x: T.softplus_pos(x),
            lambda x: T.tv_anisotropic(T.add(x, 0.0)),
        ],
    )
    def test_gradients(self, op):
        x = rand(2, 3, 5, 6, seed=11)
        out_shape = op(x).shape
        r = rand(*out_shape, seed=12, requires_grad=False) if out_shape else None
        fn = (lambda: T.sum_all(T.mul(op(x), r))) if out_shape else (lambda: op(x))
        rep = check_gradients(fn, [x], n_probes=10, seed=3)
        assert rep.max_rel_error <= 1e-4


class TestFusedLoss:
    def test_nll_and_mmse_gradients(self):
        rng = np.random.default_rng(4)
        y = rng.gamma(1.0, 1.0, (1, 1, 4, 5))
        a = Tensor(rng.uniform(1.5, 6, y.shape), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 3, y.shape), requires_grad=True)
        fn = lambda: T.add(T.sum_all(T.g0_nll(y, a, b, 1.0)), T.mul(T.tv_anisotropic(T.mmse(y, a, b, 1.0)), 0.3))
        rep = check_gradients(fn, [a, b], n_probes=10, seed=5)
        assert rep.max_rel_error <= 1e-4

    def test_tv_values(self):
        assert T.tv_anisotropic(Tensor(np.full((3, 3), 4.0))).data == 0
        assert T.tv_anisotropic(Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))).data == 4


class TestNonLocal:
    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 4, 6, 6))
        wt, wp, wg = (rng.standard_normal((4, 4)) * 0.5 for _ in range(3))
        got = T.masked_nonlocal(Tensor(x), Tensor(wt), Tensor(wp), Tensor(wg), q=3).data
        np.testing.assert_allclose(got, naive_nonlocal(x, wt, wp, wg, 3), atol=1e-10)

    def test_zero_logits_average(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5))
        wg = rng.standard_normal((2, 2))
        z = T.masked_nonlocal(Tensor(x), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), Tensor(wg), q=3).data - x
        # pixel (2, 2): admitted rows 1..2, cols 1..3
        ref = np.mean([x[0, :, i, j] @ wg for i in (1, 2) for j in (1, 2, 3)], axis=0)
        np.testing.assert_allclose(z[0, :, 2, 2], ref, atol=1e-12)

    def test_single_admitted_position(self):
        # in a single-column image the top pixel only admits itself
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 3, 4, 1))
        wt, wp, wg = (rng.standard_normal((3, 3)) for _ in range(3))
        z = T.masked_nonlocal(Tensor(x), Tensor(wt), Tensor(wp), Tensor(wg), q=3).data - x
        np.testing.assert_allclose(z[0, :, 0, 0], x[0, :, 0, 0] @ wg, atol=1e-12)

    def test_weights_normalised(self):
        mask = T.nonlocal_mask(5, 5, 3)
        assert mask.any(axis=0).all()

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        ws = [Tensor(rng.standard_normal((3, 3)) * 0.4, requires_grad=True) for _ in range(3)]
        r = rng.standard_normal((2, 3, 5, 5))
        fn = lambda: T.sum_all(T.mul(T.masked_nonlocal(x, *ws, q=3), Tensor(r)))
        rep = check_gradients(fn, [x, *ws], n_probes=20, seed=6)
        assert rep.max_rel_error <= 1e-4

    def test_even_patch(self):
        with pytest.raises(ValueError):
            T.masked_nonlocal(rand(1, 2, 4, 4), rand(2, 2), rand(2, 2), rand(2, 2), q=4)


def test_forward_deterministic():
    x, w = rand(2, 3, 8, 8, seed=1), rand(5, 3, 3, 3, seed=2)
    a = T.conv2d(x, w, padding=1).data
    b = T.conv2d(x, w, padding=1).data
    assert a.tobytes() == b.tobytes()
