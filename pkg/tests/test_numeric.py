import numpy as np
import pytest

from authorlm import numeric as nm
from authorlm.numeric import (
    NumericError,
    ParamSet,
    Tape,
    Tensor,
    backward,
    dropout_masks,
    finite_diff_check,
)


def scalar_lstm_reference(x, h, c, Wx, Wh, b):
    """Plain-python LSTM step, one batch row at a time."""
    n, H = h.shape
    h_out = np.zeros_like(h)
    c_out = np.zeros_like(c)
    for r in range(n):
        z = x[r] @ Wx + h[r] @ Wh + b
        zi, zf, zg, zo = z[:H], z[H:2 * H], z[2 * H:3 * H], z[3 * H:]
        i = 1 / (1 + np.exp(-zi))
        f = 1 / (1 + np.exp(-zf))
        g = np.tanh(zg)
        o = 1 / (1 + np.exp(-zo))
        c_out[r] = i * g + f * c[r]
        h_out[r] = o * np.tanh(c_out[r])
    return h_out, c_out


class TestAffine:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        W = Tensor(np.eye(2))
        b = Tensor(np.zeros(2))
        assert np.allclose(nm.affine(x, W, b).value, [[1.0, 2.0]])

    def test_arithmetic(self):
        x = Tensor(np.array([[1.0, 1.0]]))
        W = Tensor(np.array([[1.0], [1.0]]))
        b = Tensor(np.array([1.0]))
        assert np.allclose(nm.affine(x, W, b).value, [[3.0]])

    def test_bias_passthrough(self):
        x = Tensor(np.zeros((2, 3)))
        W = Tensor(np.random.default_rng(0).normal(size=(3, 1)))
        b = Tensor(np.array([5.0]))
        assert np.allclose(nm.affine(x, W, b).value, [[5.0], [5.0]])

    def test_shape_mismatch_names_shapes(self):
        x = Tensor(np.zeros((2, 3)))
        W = Tensor(np.zeros((4, 1)))
        b = Tensor(np.zeros(1))
        with pytest.raises(NumericError, match=r"\(2, 3\).*\(4, 1\)"):
            nm.affine(x, W, b)


class TestLstmCell:
    def test_all_zero(self):
        z = Tensor(np.zeros((2, 3)))
        zs = Tensor(np.zeros((3, 12)))
        h, c = nm.lstm_cell(z, z, z, zs, Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))
        assert np.all(h.value == 0) and np.all(c.value == 0)

    def test_gate_saturation_preserves_cell(self):
        # forget gate driven to 1, input gate to 0: c_t -> c_prev
        n, H = 2, 3
        b = np.zeros(4 * H)
        b[:H] = -40.0   # input gate
        b[H:2 * H] = 40.0  # forget gate
        x = Tensor(np.zeros((n, H)))
        c_prev = Tensor(np.random.default_rng(1).normal(size=(n, H)))
        _, c = nm.lstm_cell(x, Tensor(np.zeros((n, H))), c_prev,
                            Tensor(np.zeros((H, 4 * H))), Tensor(np.zeros((H, 4 * H))),
                            Tensor(b))
        assert np.allclose(c.value, c_prev.value, atol=1e-12)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4))
        h = rng.normal(size=(2, 3))
        c = rng.normal(size=(2, 3))
        Wx = rng.normal(size=(4, 12))
        Wh = rng.normal(size=(3, 12))
        b = rng.normal(size=12)
        ht, ct = nm.lstm_cell(Tensor(x), Tensor(h), Tensor(c),
                              Tensor(Wx), Tensor(Wh), Tensor(b))
        h_ref, c_ref = scalar_lstm_reference(x, h, c, Wx, Wh, b)
        assert np.allclose(ht.value, h_ref, atol=1e-12)
        assert np.allclose(ct.value, c_ref, atol=1e-12)


class TestSoftmaxXent:
    def test_uniform_two_way(self):
        loss = nm.softmax_xent(Tensor(np.array([[0.0, 0.0]])), [0])
        assert np.isclose(float(loss.value), np.log(2.0))

    def test_direct_arithmetic(self):
        loss = nm.softmax_xent(Tensor(np.array([[1.0, 0.0]])), [0])
        assert np.isclose(float(loss.value), np.log(1 + np.exp(-1.0)))

    def test_saturated_logit(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 1000.0
        loss = nm.softmax_xent(Tensor(logits), [2])
        assert float(loss.value) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(NumericError, match="out of range"):
            nm.softmax_xent(Tensor(np.zeros((1, 3))), [3])

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.normal(size=(4, 7))
            targets = rng.integers(0, 7, size=4)
            base = float(nm.softmax_xent(Tensor(logits), targets).value)
            c = rng.normal() * 10
            shifted = float(nm.softmax_xent(Tensor(logits + c), targets).value)
            assert np.isclose(base, shifted, atol=1e-9)

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=(3, 4)))
        targets = np.array([1, 3, 0])
        tape = Tape()
        with tape:
            loss = nm.softmax_xent(logits, targets)
        backward(loss, tape)
        z = logits.value
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(3), targets] -= 1.0
        assert np.allclose(logits.grad, p / 3.0, atol=1e-12)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        ps = ParamSet(np.float64)
        W = ps.add("W", np.random.default_rng(0).normal(size=(3, 4)))
        tape = Tape()
        with tape:
            loss = nm.sum_all(W)
        backward(loss, tape)
        assert np.all(W.grad == 1.0)

    def test_unreached_parameter_gets_zero(self):
        ps = ParamSet(np.float64)
        W = ps.add("W", np.ones((2, 2)))
        U = ps.add("U", np.ones((2, 2)))
        tape = Tape()
        with tape:
            loss = nm.sum_all(W)
        backward(loss, tape)
        assert np.all(U.grad == 0.0)

    def test_backward_before_forward_errors(self):
        with pytest.raises(NumericError, match="before"):
            backward(Tensor(np.zeros(())), Tape())

    def test_loss_not_on_tape_errors(self):
        tape = Tape()
        with tape:
            nm.sum_all(Tensor(np.ones(3)))
        with pytest.raises(NumericError, match="not produced"):
            backward(Tensor(np.zeros(())), tape)

    def test_nonscalar_loss_errors(self):
        ps = ParamSet(np.float64)
        W = ps.add("W", np.ones((2, 2)))
        tape = Tape()
        with tape:
            y = nm.relu(W)
        with pytest.raises(NumericError, match="scalar"):
            backward(y, tape)

    def test_fanout_accumulates(self):
        ps = ParamSet(np.float64)
        W = ps.add("W", np.full((2, 2), 3.0))
        tape = Tape()
        with tape:
            loss = nm.sum_all(nm.add(W, W))
        backward(loss, tape)
        assert np.all(W.grad == 2.0)


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        ps = ParamSet(np.float64)
        W = ps.add("W", np.random.default_rng(0).normal(size=(4, 3)))

        def loss_fn():
            return nm.scale(nm.sum_all(nm.mul(W, W)), 0.5)

        assert finite_diff_check(loss_fn, ps, sample=6) < 1e-9

    def test_composite_chain(self):
        rng = np.random.default_rng(1)
        ps = ParamSet(np.float64)
        W = ps.add("W", rng.normal(size=(3, 5)))
        b = ps.add("b", rng.normal(size=5))
        x = Tensor(rng.normal(size=(4, 3)))
        targets = rng.integers(0, 5, size=4)

        def loss_fn():
            return nm.softmax_xent(nm.tanh(nm.affine(x, W, b)), targets)

        assert finite_diff_check(loss_fn, ps, sample=8) < 1e-6

    def test_zero_parameter_model(self):
        ps = ParamSet(np.float64)
        assert finite_diff_check(lambda: None, ps) == 0.0

    def test_rejects_f32(self):
        ps = ParamSet(np.float32)
        W = ps.add("W", np.ones((2, 2)))
        with pytest.raises(NumericError, match="float64"):
            finite_diff_check(lambda: nm.sum_all(W), ps)

    def test_nonfinite_loss_errors(self):
        ps = ParamSet(np.float64)
        W = ps.add("W", np.full((1, 1), np.inf))
        with pytest.raises(NumericError, match="finite"):
            finite_diff_check(lambda: nm.sum_all(W), ps)


class TestDropoutMasks:
    def test_rate_zero_is_ones(self):
        rng = np.random.default_rng(0)
        mask = dropout_masks("variational-input", 0.0, (4, 5), rng)
        assert np.all(mask == 1.0)

    def test_eval_mode_is_ones(self):
        rng = np.random.default_rng(0)
        mask = dropout_masks("weight-drop", 0.5, (4, 5), rng, train=False)
        assert np.all(mask == 1.0)

    def test_bernoulli_statistics(self):
        rng = np.random.default_rng(42)
        mask = dropout_masks("variational-output", 0.5, (100, 100), rng)
        nonzero = mask != 0
        assert abs(nonzero.mean() - 0.5) < 0.02
        assert np.allclose(mask[nonzero], 2.0)

    def test_unknown_kind(self):
        with pytest.raises(NumericError, match="kind"):
            dropout_masks("per-step", 0.5, (2, 2), np.random.default_rng(0))

    def test_bad_rate(self):
        with pytest.raises(NumericError, match="rate"):
            dropout_masks("weight-drop", 1.0, (2, 2), np.random.default_rng(0))


class TestPrimitiveGradients:
    """Every sanctioned primitive against central differences."""

    def test_all_primitives(self):
        rng = np.random.default_rng(9)
        ps = ParamSet(np.float64)
        E = ps.add("E", rng.normal(size=(6, 4)))
        W = ps.add("W", rng.normal(size=(4, 4)))
        b = ps.add("b", rng.normal(size=4))
        Wx = ps.add("Wx", rng.normal(size=(4, 8)) * 0.4)
        Wh = ps.add("Wh", rng.normal(size=(2, 8)) * 0.4)
        bh = ps.add("bh", rng.normal(size=8) * 0.1)
        bo = ps.add("bo", rng.normal(size=6) * 0.1)
        idx = np.array([0, 2, 5, 2])
        mask = (rng.random((4, 4)) > 0.3) / 0.7
        targets = rng.integers(0, 6, size=8)

        def loss_fn():
            x = nm.take_rows(E, idx)
            x = nm.affine(x, W, b)
            x = nm.mul_mask(x, mask)
            h, c = nm.lstm_cell(x, Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 2))),
                                Wx, Wh, bh)
            u = nm.concat_cols(nm.sigmoid(h), nm.tanh(c))
            v = nm.concat_rows([u, nm.relu(nm.sub(u, nm.scale(u, 0.5)))])
            logits = nm.bias_add(nm.matmul_t(v, E), bo)
            part = nm.softmax_xent(logits, targets)
            return nm.add(part, nm.mean_all(nm.mul(u, u)))

        assert finite_diff_check(loss_fn, ps, sample=6) < 1e-6


class TestParamSet:
    def test_duplicate_name_rejected(self):
        ps = ParamSet()
        ps.add("W", np.zeros(2))
        with pytest.raises(NumericError, match="duplicate"):
            ps.add("W", np.zeros(2))

    def test_state_dict_roundtrip(self):
        ps = ParamSet(np.float64)
        W = ps.add("W", np.arange(6, dtype=float).reshape(2, 3))
        state = ps.state_dict()
        W.value[...] = 0
        ps.load_state_dict(state)
        assert np.all(W.value == np.arange(6).reshape(2, 3))

    def test_grad_slots_preallocated(self):
        ps = ParamSet()
        W = ps.add("W", np.zeros((2, 2)))
        assert W.grad is not None and np.all(W.grad == 0)
