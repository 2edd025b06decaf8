"""
Tests for the differentiation core: primitive forward values, shape and
finiteness errors, and tape gradients against central finite differences.
"""
import threading

import numpy as np
import pytest

from services.autodiff import (
    PRIMITIVES,
    Tape,
    Tensor,
    add,
    backward,
    concatenate,
    conv_time,
    cross_entropy,
    dropout,
    flatten,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    primitive_forward,
    relu,
    reshape,
    sigmoid,
    slice_,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
    unbroadcast,
    weighted_cross_entropy,
)
from services.errors import DataError, NumericError, ShapeError
from tests.conftest import gradient_check, param


# =====================================================
# FORWARD VALUES
# =====================================================

class TestForward:
    def test_softmax_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_softmax_values(self):
        out = softmax(Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, [0.0900, 0.2447, 0.6652], atol=1e-4)

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax(Tensor(50 * rng.standard_normal((7, 11))))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(7), atol=1e-12)

    def test_softmax_mask_zeroes_entries(self):
        mask = np.array([[True, False, True], [True, True, False]])
        out = softmax(Tensor([[1.0, 100.0, 1.0], [0.0, 0.0, 100.0]]), mask=mask)
        np.testing.assert_allclose(out.data, [[0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])

    def test_softmax_fully_masked_row(self):
        with pytest.raises(NumericError):
            softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))

    def test_conv_output_length(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 3, 50)))
        w = Tensor(rng.standard_normal((4, 1, 9)))
        assert conv_time(x, w).shape == (2, 4, 3, 42)

    def test_conv_matches_direct_loop(self, rng):
        x = rng.standard_normal((2, 3, 2, 8))
        w = rng.standard_normal((4, 3, 3))
        out = conv_time(Tensor(x), Tensor(w)).data
        expected = np.zeros((2, 4, 2, 6))
        for b in range(2):
            for f in range(4):
                for c in range(2):
                    for t in range(6):
                        expected[b, f, c, t] = (x[b, :, c, t:t + 3] * w[f]).sum()
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_gelu_known_points(self):
        out = gelu(Tensor([0.0, 10.0, -10.0]))
        np.testing.assert_allclose(out.data, [0.0, 10.0, 0.0], atol=1e-8)

    def test_layer_norm_standardizes(self, rng):
        x = Tensor(3 + 5 * rng.standard_normal((4, 16)))
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-3)

    def test_dropout_scales_kept_entries(self):
        out = dropout(Tensor([1.0, 2.0, 3.0, 4.0]), np.array([1, 0, 1, 0]), keep_prob=0.5)
        np.testing.assert_allclose(out.data, [2.0, 0.0, 6.0, 0.0])

    def test_operator_sugar(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])
        np.testing.assert_allclose((a + b).data, [4.0, 7.0])
        np.testing.assert_allclose((a - b).data, [-2.0, -3.0])
        np.testing.assert_allclose((2.0 * a).data, [2.0, 4.0])
        np.testing.assert_allclose((-a).data, [-1.0, -2.0])

    def test_primitive_forward_dispatch(self):
        out = primitive_forward("matmul", Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])
        with pytest.raises(KeyError):
            primitive_forward("conv3d", Tensor([1.0]))

    def test_every_listed_primitive_is_callable(self):
        assert {"matmul", "conv_time", "softmax", "layer_norm", "weighted_cross_entropy"} <= set(PRIMITIVES)

    def test_unbroadcast_sums_expanded_axes(self):
        g = np.ones((2, 3, 4))
        assert unbroadcast(g, (3, 1)).shape == (3, 1)
        np.testing.assert_allclose(unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))


# =====================================================
# ERRORS
# =====================================================

class TestErrors:
    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as excinfo:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        message = str(excinfo.value)
        assert "matmul" in message
        assert "(2, 3)" in message and "(4, 5)" in message

    def test_add_not_broadcastable(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    def test_conv_kernel_longer_than_input(self):
        with pytest.raises(ShapeError):
            conv_time(Tensor(np.zeros((1, 1, 1, 5))), Tensor(np.zeros((1, 1, 9))))

    def test_reshape_bad_size(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros(6)), (4, 2))

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            tanh(Tensor([1.0, np.nan]))
        with pytest.raises(NumericError):
            add(Tensor([np.inf]), Tensor([1.0]))

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(NumericError):
            backward(tape, y)

    def test_advanced_indexing_rejected(self):
        with pytest.raises(ShapeError):
            slice_(Tensor(np.zeros(4)), [0, 2])


# =====================================================
# BACKWARD
# =====================================================

class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = param(rng, 3, 4, 2)
        with Tape() as tape:
            loss = sum_(x)
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[x], np.ones((3, 4, 2)))
        assert x.grad is grads[x]

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_(mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_reused_tensor_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_(add(mul(x, x), mul(x, Tensor([2.0]))))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_unused_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([[5.0]], requires_grad=True)
        with Tape() as tape:
            loss = sum_(x)
        backward(tape, loss, leaves=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros((1, 1)))

    def test_constants_not_recorded(self):
        with Tape() as tape:
            sum_(mul(Tensor([1.0]), Tensor([2.0])))
        assert len(tape) == 0

    def test_nothing_recorded_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        tape = Tape()
        mul(x, x)
        assert len(tape) == 0

    def test_backward_replaces_stale_grad(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = sum_(x)
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, [1.0, 1.0])

    def test_tapes_are_thread_local(self):
        recorded = {}

        def worker(name):
            x = Tensor([1.0, 2.0], requires_grad=True)
            with Tape() as tape:
                for _ in range(5):
                    x = tanh(x)
            recorded[name] = len(tape)

        with Tape() as main_tape:
            threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        assert len(main_tape) == 0
        assert all(count == 5 for count in recorded.values())


# =====================================================
# FINITE-DIFFERENCE GRADIENT CHECKS
# =====================================================

def _away_from_zero(rng, *shape):
    z = rng.standard_normal(shape)
    return Tensor(np.sign(z) * (0.1 + np.abs(z)), requires_grad=True)


def _case(name, rng):
    if name == "add":
        return add, [param(rng, 3, 4), param(rng, 4)]
    if name == "sub":
        return sub, [param(rng, 2, 3), param(rng, 2, 1)]
    if name == "mul":
        return mul, [param(rng, 3, 4), param(rng, 1, 4)]
    if name == "matmul":
        return matmul, [param(rng, 2, 3, 4), param(rng, 4, 5)]
    if name == "sigmoid":
        return sigmoid, [param(rng, 3, 4, scale=2.0)]
    if name == "tanh":
        return tanh, [param(rng, 3, 4)]
    if name == "relu":
        return relu, [_away_from_zero(rng, 3, 4)]
    if name == "gelu":
        return gelu, [param(rng, 3, 4, scale=2.0)]
    if name == "softmax":
        return softmax, [param(rng, 3, 5, scale=2.0)]
    if name == "masked_softmax":
        mask = np.tril(np.ones((4, 4), dtype=bool))
        return (lambda x: softmax(x, mask=mask)), [param(rng, 2, 4, 4)]
    if name == "concatenate":
        return (lambda a, b: concatenate([a, b], axis=1)), [param(rng, 2, 3), param(rng, 2, 2)]
    if name == "slice":
        return (lambda x: x[1:, ::2]), [param(rng, 3, 5)]
    if name == "reshape":
        return (lambda x: reshape(x, (3, 4))), [param(rng, 2, 6)]
    if name == "flatten":
        return flatten, [param(rng, 2, 3, 4)]
    if name == "transpose":
        return (lambda x: transpose(x, (2, 0, 1))), [param(rng, 2, 3, 4)]
    if name == "sum":
        return (lambda x: sum_(x, axis=1)), [param(rng, 2, 3, 4)]
    if name == "mean":
        return (lambda x: mean(x, axis=(0, 2), keepdims=True)), [param(rng, 2, 3, 4)]
    if name == "conv_time":
        return conv_time, [param(rng, 2, 2, 3, 7), param(rng, 3, 2, 3)]
    if name == "dropout":
        mask = rng.random((3, 4)) < 0.7
        return (lambda x: dropout(x, mask, 0.7)), [param(rng, 3, 4)]
    if name == "layer_norm":
        return layer_norm, [param(rng, 3, 5), param(rng, 5), param(rng, 5)]
    if name == "weighted_cross_entropy":
        labels = rng.integers(0, 3, size=4)
        weights = 0.5 + rng.random(3)
        return (lambda z: weighted_cross_entropy(z, labels, weights)), [param(rng, 4, 3, scale=2.0)]
    raise KeyError(name)


GRADIENT_CASES = [
    "add", "sub", "mul", "matmul", "sigmoid", "tanh", "relu", "gelu", "softmax",
    "masked_softmax", "concatenate", "slice", "reshape", "flatten", "transpose",
    "sum", "mean", "conv_time", "dropout", "layer_norm", "weighted_cross_entropy",
]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", GRADIENT_CASES)
def test_primitive_gradient_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    fn, inputs = _case(name, rng)
    assert gradient_check(fn, inputs, rng) < 1e-6


def test_composite_gradient(rng):
    # two-layer perceptron with a weighted loss on top
    x = Tensor(rng.standard_normal((5, 4)))
    w1, b1, w2 = param(rng, 4, 6), param(rng, 6), param(rng, 6, 3)
    labels = np.array([0, 1, 2, 1, 0])

    def net(w1, b1, w2):
        return weighted_cross_entropy(matmul(tanh(add(matmul(x, w1), b1)), w2), labels, [1.0, 2.0, 0.5])

    assert gradient_check(net, [w1, b1, w2], rng) < 1e-6


# =====================================================
# CROSS-ENTROPY
# =====================================================

class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = weighted_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3], np.ones(4))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_two_class_value(self):
        loss = weighted_cross_entropy(Tensor([[2.0, 0.0]]), [0], [1.0, 1.0])
        assert loss.item() == pytest.approx(-np.log(np.exp(2) / (np.exp(2) + 1)))
        assert loss.item() == pytest.approx(0.1269, abs=1e-4)

    def test_zero_weight_sum(self):
        with pytest.raises(DataError, match="zero weight sum"):
            weighted_cross_entropy(Tensor(np.zeros((2, 2))), [0, 0], [0.0, 1.0])

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            weighted_cross_entropy(Tensor(np.zeros((1, 3))), [3], np.ones(3))

    def test_weights_normalize_by_batch_weight(self):
        logits = Tensor([[1.0, 0.0], [0.0, 1.0]])
        plain = cross_entropy(logits, [0, 0]).item()
        heavy = weighted_cross_entropy(logits, [0, 0], [5.0, 1.0]).item()
        assert heavy == pytest.approx(plain)

    def test_large_logits_stay_finite(self):
        loss = cross_entropy(Tensor([[1000.0, -1000.0]]), [1])
        assert loss.item() == pytest.approx(2000.0)
