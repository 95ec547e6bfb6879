"""
Tests for the tape-based tensor library: forward values, gradients and error cases
"""
import numpy as np
import pytest

from src.errors import ShapeMismatchError
from src.tensor import (Tape, Tensor, add, check_gradients, concatenate, conv2d, default_dtype, layer_norm,
                        linear, masked_fill, matmul, max_pool2d, mean, minimum, mul, outer3, rank1_sum, relu,
                        reshape, sigmoid, softmax, sub, sum_, transpose)


def _scalar(t):
    """Weighted sum so every output entry gets a distinct upstream gradient"""
    weights = np.linspace(0.5, 1.5, t.size).reshape(t.shape)
    return sum_(mul(t, weights))


def _away_from(values, point, gap=0.05):
    """Push entries that sit too close to a kink"""
    values = values.copy()
    close = np.abs(values - point) < gap
    values[close] += 2 * gap
    return values


OPS = {
    "add_broadcast": (lambda a, b: _scalar(add(a, b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: _scalar(sub(a, b)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "mul_broadcast": (lambda a, b: _scalar(mul(a, b)), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))]),
    "relu": (lambda a: _scalar(relu(a)), lambda r: [_away_from(r.normal(size=(4, 5)), 0.0)]),
    "sigmoid": (lambda a: _scalar(sigmoid(a)), lambda r: [r.normal(scale=3.0, size=(4, 5))]),
    "minimum": (lambda a: _scalar(minimum(a, 1.0)), lambda r: [_away_from(r.uniform(0, 2, size=(3, 4)), 1.0)]),
    "sum_axis": (lambda a: _scalar(sum_(a, axis=1)), lambda r: [r.normal(size=(3, 4, 2))]),
    "mean": (lambda a: _scalar(mean(a, axis=0, keepdims=True)), lambda r: [r.normal(size=(3, 4))]),
    "reshape_transpose": (lambda a: _scalar(transpose(reshape(a, (2, 6)), (1, 0))), lambda r: [r.normal(size=(3, 4))]),
    "concatenate": (lambda a, b: _scalar(concatenate([a, b], axis=1)),
                    lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "matmul_batched": (lambda a, b: _scalar(matmul(a, b)), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "linear": (lambda x, w, b: _scalar(linear(x, w, b)),
               lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))]),
    "softmax": (lambda a: _scalar(softmax(a, axis=-1)), lambda r: [r.normal(size=(3, 5))]),
    "masked_softmax": (lambda a: _scalar(softmax(masked_fill(a, np.eye(4, dtype=bool)), axis=-1)),
                       lambda r: [r.normal(size=(2, 4, 4))]),
    "layer_norm": (lambda x, g, b: _scalar(layer_norm(x, g, b)),
                   lambda r: [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
    "outer3": (lambda z, y, x: _scalar(outer3(z, y, x)), lambda r: [r.uniform(size=(2, 3)) for _ in range(3)]),
    "rank1_sum": (lambda z, y, x: _scalar(rank1_sum(z, y, x)), lambda r: [r.uniform(size=(3, 4)) for _ in range(3)]),
    "conv2d_stride2": (lambda x, w, b: _scalar(conv2d(x, w, b, stride=2, padding=1)),
                       lambda r: [r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
    "conv2d_no_bias": (lambda x, w: _scalar(conv2d(x, w, stride=1, padding=0)),
                       lambda r: [r.normal(size=(1, 1, 5, 5)), r.normal(size=(2, 1, 3, 3))]),
    "max_pool2d": (lambda a: _scalar(max_pool2d(a)), lambda r: [r.permutation(32).reshape(2, 4, 4) / 7.0]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_operation_gradients(name):
    """Tape gradients match central finite differences on 10 random instances"""
    fn, make_inputs = OPS[name]
    for seed in range(10):
        result = check_gradients(fn, make_inputs(np.random.default_rng(seed)), step=1e-3)
        assert result.passed, f"{name} seed {seed}: {result}"
        assert result.checked > 0


def test_reused_tensor_accumulates_gradient():
    """x * x + x gives 2x + 1"""
    tape = Tape()
    x = tape.leaf(np.array([1.0, -2.0, 3.0]))
    loss = sum_(add(mul(x, x), x))
    tape.backward(loss)
    np.testing.assert_allclose(tape.grad(x), [3.0, -3.0, 7.0])


def test_unreached_leaf_has_zero_gradient():
    tape = Tape()
    used = tape.leaf(np.ones(3))
    unused = tape.leaf(np.ones((2, 2)))
    tape.backward(sum_(used))
    assert np.array_equal(tape.grad(unused), np.zeros((2, 2)))


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(mul(x, 2.0))


def test_untracked_operations_record_nothing():
    tape = Tape()
    out = add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert not out.tracked
    assert len(tape) == 0


def test_operators_match_functions():
    tape = Tape()
    a = tape.leaf(np.array([1.0, 2.0]))
    b = tape.leaf(np.array([3.0, 5.0]))
    out = (a * b - a) / 2.0 + 1.0
    np.testing.assert_allclose(out.numpy(), [2.0, 5.0])
    tape.backward(out.sum())
    np.testing.assert_allclose(tape.grad(a), [1.0, 2.0])
    np.testing.assert_allclose(tape.grad(b), [0.5, 1.0])


def test_numpy_left_operand_defers_to_tensor():
    out = np.ones(3) + Tensor(np.arange(3))
    assert isinstance(out, Tensor)
    np.testing.assert_allclose(out.numpy(), [1.0, 2.0, 3.0])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as info:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)


def test_add_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_minimum_clips_and_blocks_gradient():
    tape = Tape()
    x = tape.leaf(np.array([0.5, 1.5, 3.0]))
    out = minimum(x, 1.0)
    np.testing.assert_allclose(out.numpy(), [0.5, 1.0, 1.0])
    tape.backward(out.sum())
    np.testing.assert_allclose(tape.grad(x), [1.0, 0.0, 0.0])


def test_masked_entries_get_no_gradient():
    tape = Tape()
    x = tape.leaf(np.arange(4.0).reshape(2, 2))
    mask = np.array([[True, False], [False, True]])
    tape.backward(sum_(masked_fill(x, mask)))
    np.testing.assert_array_equal(tape.grad(x), [[0.0, 1.0], [1.0, 0.0]])


def test_softmax_rows_sum_to_one():
    out = softmax(Tensor(np.random.default_rng(0).normal(size=(4, 7))), axis=-1)
    np.testing.assert_allclose(out.numpy().sum(axis=-1), np.ones(4), atol=1e-6)


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).numpy()
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-7)
    for dtype in (np.float32, np.float64):
        with default_dtype(dtype):
            low = sigmoid(Tensor(np.array([-1000.0, -100.0]))).numpy()
        assert np.all((low > 0.0) & (low < 1e-6))


def test_max_pool_routes_ties_to_first_maximum():
    tape = Tape()
    x = tape.leaf(np.ones((1, 2, 2)))
    tape.backward(sum_(max_pool2d(x)))
    np.testing.assert_array_equal(tape.grad(x), [[[1.0, 0.0], [0.0, 0.0]]])


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    with default_dtype(np.float64):
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).numpy()
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected[0, o, i, j] = (padded[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_default_dtype_is_float32_and_scoped():
    assert Tensor(1.0).data.dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor(1.0).data.dtype == np.float64
    assert Tensor(1.0).data.dtype == np.float32
