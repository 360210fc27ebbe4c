import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neural_oie import numeric as nm
from neural_oie.numeric import LstmCellWeights, ParamTensor


def _weights(W_ih, W_hh, b):
    return LstmCellWeights(ParamTensor("W_ih", np.asarray(W_ih, float)),
                           ParamTensor("W_hh", np.asarray(W_hh, float)),
                           ParamTensor("b", np.asarray(b, float)))


class TestLinear:
    def test_zero_weights(self):
        np.testing.assert_array_equal(nm.linear([1.0, 2.0], np.zeros((2, 2)), np.zeros(2)), [0.0, 0.0])

    def test_identity(self):
        np.testing.assert_array_equal(nm.linear([3.0, -1.0], np.eye(2), np.zeros(2)), [3.0, -1.0])

    def test_hand_arithmetic(self):
        # [[1,2],[3,4]] @ [1,1] + [0.5,-0.5] = [3.5, 6.5]
        y = nm.linear([1.0, 1.0], np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -0.5]))
        np.testing.assert_array_equal(y, [3.5, 6.5])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nm.DimensionError, match=r"\(3,\).*\(2, 2\)"):
            nm.linear(np.ones(3), np.eye(2), np.zeros(2))


class TestSoftmax:
    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.3, 700.0])
    def test_constant_vector_is_uniform(self, c):
        np.testing.assert_allclose(nm.softmax(np.full(3, c)), [1 / 3] * 3, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(nm.softmax([0.0, math.log(3.0)]), [0.25, 0.75], atol=1e-15)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            nm.softmax(np.array([]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 500), elements=st.floats(-30, 30)), st.floats(-1e3, 1e3))
    def test_normalised_and_shift_invariant(self, v, k):
        p = nm.softmax(v)
        assert abs(p.sum() - 1.0) < 1e-6
        assert np.all(p > 0) and np.all(p <= 1)
        np.testing.assert_allclose(nm.softmax(v + k), p, rtol=0, atol=1e-12)

    def test_no_overflow_on_large_inputs(self):
        p = nm.softmax(np.array([1000.0, 1000.0, -1000.0]))
        assert np.all(np.isfinite(p))


def _lstm_reference(x, h, c, W_ih, W_hh, b):
    """Scalar mpmath evaluation of the four-gate recurrence (50 digits)."""
    mpmath.mp.dps = 50
    H = len(h)
    z = []
    for r in range(4 * H):
        acc = mpmath.mpf(b[r])
        acc += mpmath.fsum(mpmath.mpf(W_ih[r][j]) * mpmath.mpf(x[j]) for j in range(len(x)))
        acc += mpmath.fsum(mpmath.mpf(W_hh[r][j]) * mpmath.mpf(h[j]) for j in range(H))
        z.append(acc)
    sig = lambda t: 1 / (1 + mpmath.exp(-t))  # noqa: E731
    h_new, c_new = [], []
    for k in range(H):
        i, f, g, o = sig(z[k]), sig(z[H + k]), mpmath.tanh(z[2 * H + k]), sig(z[3 * H + k])
        ck = f * mpmath.mpf(c[k]) + i * g
        c_new.append(float(ck))
        h_new.append(float(o * mpmath.tanh(ck)))
    return np.array(h_new), np.array(c_new)


class TestLstmCell:
    def test_zero_everything(self):
        w = _weights(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
        h, c = nm.lstm_cell(np.ones(3), np.zeros(2), np.zeros(2), w)
        np.testing.assert_array_equal(h, 0.0)
        np.testing.assert_array_equal(c, 0.0)

    def test_zero_weights_closed_form(self):
        w = _weights(np.zeros((12, 2)), np.zeros((12, 3)), np.zeros(12))
        v = np.array([0.7, -2.0, 5.0])
        h, c = nm.lstm_cell(np.array([1.0, -1.0]), np.array([0.3, 0.1, -0.9]), v, w)
        np.testing.assert_allclose(c, 0.5 * v, atol=1e-12)
        np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * v), atol=1e-12)

    def test_matches_high_precision_reference(self):
        rng = np.random.default_rng(3)
        x, h0, c0 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        W_ih, W_hh, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 3)), rng.normal(size=12)
        h, c = nm.lstm_cell(x, h0, c0, _weights(W_ih, W_hh, b))
        h_ref, c_ref = _lstm_reference(x, h0, c0, W_ih, W_hh, b)
        np.testing.assert_allclose(h, h_ref, atol=1e-13)
        np.testing.assert_allclose(c, c_ref, atol=1e-13)

    def test_dimension_mismatch(self):
        w = _weights(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
        with pytest.raises(nm.DimensionError):
            nm.lstm_cell(np.ones(4), np.zeros(2), np.zeros(2), w)

    def test_inconsistent_weights(self):
        with pytest.raises(nm.DimensionError):
            _weights(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))


class TestBackward:
    def test_zero_upstream_leaves_grads(self):
        rng = nm.make_rng(0)
        W = ParamTensor.uniform("W", (3, 4), rng)
        b = ParamTensor.uniform("b", (3,), rng)
        W.grad[...] = 1.5
        _, cache = nm.linear_forward(rng.normal(size=4), W, b)
        nm.linear_backward(np.zeros(3), cache)
        np.testing.assert_array_equal(W.grad, 1.5)
        np.testing.assert_array_equal(b.grad, 0.0)

    def test_bias_gradient_of_sum_is_ones(self):
        rng = nm.make_rng(1)
        W, b = ParamTensor.uniform("W", (5, 2), rng), ParamTensor.uniform("b", (5,), rng)
        y, cache = nm.linear_forward(rng.normal(size=2), W, b)
        nm.linear_backward(np.ones_like(y), cache)
        np.testing.assert_array_equal(b.grad, np.ones(5))

    def test_two_stacked_linears_match_finite_differences(self):
        rng = nm.make_rng(2)
        W1, b1 = ParamTensor.uniform("W1", (4, 3), rng, 1.0), ParamTensor.uniform("b1", (4,), rng, 1.0)
        W2, b2 = ParamTensor.uniform("W2", (2, 4), rng, 1.0), ParamTensor.uniform("b2", (2,), rng, 1.0)
        x = rng.normal(size=3)
        c = rng.normal(size=2)

        def f():
            h, k1 = nm.linear_forward(x, W1, b1)
            y, k2 = nm.linear_forward(h, W2, b2)
            nm.linear_backward(nm.linear_backward(c, k2), k1)
            return float(c @ y)

        assert nm.gradient_check(f, [W1, b1, W2, b2], num_samples=None) < 1e-6

    def test_backward_accumulates(self):
        rng = nm.make_rng(4)
        w = LstmCellWeights.init("cell", 3, 2, rng, scale=1.0)
        x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        _, _, cache = nm.lstm_cell_forward(x, h0, c0, w)
        g1h, g1c, g2h, g2c = rng.normal(size=(4, 2, 2))
        nm.lstm_cell_backward(g1h, g1c, cache)
        nm.lstm_cell_backward(g2h, g2c, cache)
        twice = [p.grad.copy() for p in w.params()]
        nm.zero_grads(w.params())
        nm.lstm_cell_backward(g1h + g2h, g1c + g2c, cache)
        for a, p in zip(twice, w.params()):
            np.testing.assert_allclose(a, p.grad, rtol=0, atol=1e-12)

    def test_zero_grad(self):
        p = ParamTensor("p", np.ones(3))
        p.grad += 2.0
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, 0.0)


class TestGradientCheck:
    def test_linear_softmax_nll(self):
        rng = nm.make_rng(5)
        W, b = ParamTensor.uniform("W", (6, 4), rng, 1.0), ParamTensor.uniform("b", (6,), rng, 1.0)
        x = rng.normal(size=(3, 4))
        targets = [1, 4, 0]

        def f():
            logits, cache = nm.linear_forward(x, W, b)
            loss = sum(float(nm.nll_loss(logits[i], t)) for i, t in enumerate(targets))
            d = np.stack([nm.nll_loss_backward(logits[i], t) for i, t in enumerate(targets)])
            nm.linear_backward(d, cache)
            return loss

        assert nm.gradient_check(f, [W, b], num_samples=None) < 1e-6

    def test_single_lstm_cell(self):
        rng = nm.make_rng(6)
        w = LstmCellWeights.init("cell", 3, 4, rng, scale=1.0)
        x, h0, c0 = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
        ch, cc = rng.normal(size=4), rng.normal(size=4)

        def f():
            h, c, cache = nm.lstm_cell_forward(x, h0, c0, w)
            nm.lstm_cell_backward(ch, cc, cache)
            return float(ch @ h + cc @ c)

        assert nm.gradient_check(f, w.params(), num_samples=None) < 1e-6

    def test_attention(self):
        rng = nm.make_rng(7)
        W_s, v = ParamTensor.uniform("W_s", (3, 4), rng, 1.0), ParamTensor.uniform("v", (3,), rng, 1.0)
        s = rng.normal(size=(2, 4))
        keys, vals = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 6))
        mask = np.ones((2, 5))
        mask[1, 3:] = 0
        cw, aw = rng.normal(size=(2, 6)), rng.normal(size=(2, 5))

        def f():
            ctx, alpha, _, cache = nm.additive_attention_forward(s, keys, vals, mask, W_s, v)
            nm.additive_attention_backward(cw, aw, cache)
            return float(np.sum(cw * ctx) + np.sum(aw * alpha))

        assert nm.gradient_check(f, [W_s, v], num_samples=None) < 1e-6

    def test_non_scalar_objective_rejected(self):
        p = ParamTensor("p", np.ones(2))
        with pytest.raises(ValueError, match="scalar"):
            nm.gradient_check(lambda: p.value * 2, [p])

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            nm.gradient_check(lambda: 0.0, [], eps=0.0)


def test_clip_grad_norm_bounds_norm():
    rng = nm.make_rng(8)
    ps = [ParamTensor("a", np.zeros(5)), ParamTensor("b", np.zeros((2, 3)))]
    for p in ps:
        p.grad[...] = rng.normal(size=p.shape) * 10
    nm.clip_grad_norm(ps, 5.0)
    assert nm.global_grad_norm(ps) <= 5.0 + 1e-9


def test_rng_is_reproducible():
    a = nm.make_rng(123).random(5)
    b = nm.make_rng(123).random(5)
    np.testing.assert_array_equal(a, b)


def test_debug_guard_raises_on_nan(monkeypatch):
    monkeypatch.setattr(nm, "DEBUG", True)
    with pytest.raises(nm.NonFiniteError):
        nm.linear(np.array([np.nan, 1.0]), np.eye(2), np.zeros(2))


def test_norm_reduction_tolerates_a_near_zero_coordinate():
    # d f / d p1 = 1e-12 is below what a difference quotient on f ~ 4 can resolve
    p = ParamTensor("p", np.array([1.0, 0.0]))

    def f():
        p.grad += np.array([2.0 * p.value[0], 1e-12])
        return float(p.value[0] ** 2 + 1e-12 * p.value[1] + 3.0)

    assert nm.gradient_check(f, [p], num_samples=None) > 0.5
    assert nm.gradient_check(f, [p], num_samples=None, reduction="norm") < 1e-9
    with pytest.raises(ValueError):
        nm.gradient_check(f, [p], reduction="sum")


def test_global_reduction_tolerates_a_near_zero_tensor():
    p = ParamTensor("p", np.array([1.0, -2.0]))
    q = ParamTensor("q", np.array([0.0]))

    def f():
        p.grad += 2.0 * p.value
        q.grad += 1e-12
        return float(np.sum(p.value**2) + 1e-12 * q.value[0] + 3.0)

    assert nm.gradient_check(f, [p, q], num_samples=None, reduction="norm") > 0.5
    assert nm.gradient_check(f, [p, q], num_samples=None, reduction="global") < 1e-9


def test_global_reduction_catches_a_wrong_tensor():
    p = ParamTensor("p", np.array([1.0, -2.0]))
    q = ParamTensor("q", np.array([0.5]))

    def f():
        p.grad += 2.0 * p.value
        q.grad += 0.0  # true derivative is 3
        return float(np.sum(p.value**2) + 3.0 * q.value[0])

    assert nm.gradient_check(f, [p, q], num_samples=None, reduction="global") > 0.5
