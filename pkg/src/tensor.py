"""
Dense tensors with reverse-mode differentiation on an append-only tape.

A forward pass that needs gradients starts from a `Tape`: parameters enter it through
`tape.leaf(...)`, every operation on a tensor that carries a tape handle is recorded, and
`tape.backward(loss)` walks the records in reverse order. Tensors without a handle are plain
immutable values and cost nothing to record.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ShapeMismatchError

MASK_FILL = -1e9

_dtype = contextvars.ContextVar("tensor_dtype", default=np.float32)


def get_default_dtype():
    return _dtype.get()


@contextmanager
def default_dtype(dtype):
    """Temporarily change the float type new tensors are stored in (gradient checks use float64)"""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


class Tensor:
    """N-dimensional float array, optionally bound to a node of a differentiation tape"""

    __slots__ = ("data", "node_id", "tape")
    __array_ufunc__ = None

    def __init__(self, data, node_id: Optional[int] = None, tape: Optional["Tape"] = None):
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        node = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{node})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


@dataclass
class Node:
    op: str
    parents: Tuple[Optional[int], ...]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: Tuple[int, ...]
    name: Optional[str] = None


class Tape:
    """Append-only record of operations; parents always precede their consumers"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.gradients: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: Optional[str] = None) -> Tensor:
        data = value.data if isinstance(value, Tensor) else value
        tensor = Tensor(data)
        self.nodes.append(Node("leaf", (), None, tensor.shape, name))
        tensor.node_id = len(self.nodes) - 1
        tensor.tape = self
        return tensor

    def record(self, op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        parents = tuple(t.node_id if t.tape is self else None for t in inputs)
        out = Tensor(data)
        self.nodes.append(Node(op, parents, backward, out.shape))
        out.node_id = len(self.nodes) - 1
        out.tape = self
        return out

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Reverse-mode sweep from a scalar loss; fills and returns `self.gradients`"""
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss is not recorded on this tape")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.data.dtype)}
        for node_id in range(loss.node_id, -1, -1):
            upstream = grads.get(node_id)
            node = self.nodes[node_id]
            if upstream is None or node.backward is None:
                continue
            for parent, grad in zip(node.parents, node.backward(upstream)):
                if parent is None or grad is None:
                    continue
                grad = np.asarray(grad, dtype=loss.data.dtype)
                # never in place: a backward rule may hand out its upstream array
                grads[parent] = grads[parent] + grad if parent in grads else grad
        self.gradients = grads
        return grads

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward sweep w.r.t. a tensor; zeros when unreached"""
        if tensor.tape is not self or tensor.node_id is None:
            raise ValueError("tensor is not recorded on this tape")
        grad = self.gradients.get(tensor.node_id)
        if grad is None:
            return np.zeros(tensor.shape, dtype=tensor.data.dtype)
        return grad


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    return tape.backward(loss)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    if tape is None:
        return Tensor(data)
    return tape.record(op, data, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} is out of range for a {ndim}-d tensor")
    return axis % ndim


# -- elementwise ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, factor: float) -> Tensor:
    a = _lift(a)
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(x) -> Tensor:
    x = _lift(x)
    positive = x.data > 0
    return _result("relu", np.where(positive, x.data, 0), (x,), lambda g: (g * positive,))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    decay = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))
    # saturated negatives stay strictly positive
    out = np.maximum(out, np.finfo(out.dtype).tiny)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def minimum(x, ceiling: float = 1.0) -> Tensor:
    """min(ceiling, x); the gradient is 1 below the ceiling and 0 where clipped"""
    x = _lift(x)
    passing = x.data < ceiling
    return _result("minimum", np.where(passing, x.data, ceiling), (x,), lambda g: (g * passing,))


def masked_fill(x, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    """Replace entries where `mask` is True; those entries receive no gradient"""
    x = _lift(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeMismatchError("masked_fill", x.shape, mask.shape) from None
    out = np.where(mask, value, x.data)
    return _result("masked_fill", out, (x,), lambda g: (_unbroadcast(np.where(mask, 0, g), x.shape),))


# -- reductions and layout -----------------------------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result("sum", out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _result("mean", out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, shape) from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _lift(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x) -> Tensor:
    x = _lift(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concatenate", tensors[0].shape, tensors[-1].shape) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concatenate", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- linear algebra ------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result("matmul", a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias), weight stored as [in, out]"""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine gain and bias"""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    if eps <= 0:
        raise ValueError("layer_norm needs eps > 0")
    if gain.shape[-1:] != x.shape[-1:] or bias.shape[-1:] != x.shape[-1:]:
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def backward(g):
        g_normed = g * gain.data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(g * normed, gain.shape), _unbroadcast(g, bias.shape)

    return _result("layer_norm", out, (x, gain, bias), backward)


def outer3(z, y, x) -> Tensor:
    """result[..., i, j, k] = z[..., i] * y[..., j] * x[..., k]"""
    z, y, x = _lift(z), _lift(y), _lift(x)
    if not (z.shape == y.shape == x.shape):
        raise ShapeMismatchError("outer3", z.shape, y.shape if y.shape != z.shape else x.shape)
    out = np.einsum("...i,...j,...k->...ijk", z.data, y.data, x.data)

    def backward(g):
        return (
            np.einsum("...ijk,...j,...k->...i", g, y.data, x.data),
            np.einsum("...ijk,...i,...k->...j", g, z.data, x.data),
            np.einsum("...ijk,...i,...j->...k", g, z.data, y.data),
        )

    return _result("outer3", out, (z, y, x), backward)


def rank1_sum(z, y, x) -> Tensor:
    """Sum of k rank-1 volumes: factors [..., k, N] -> grid [..., N, N, N], one output buffer"""
    z, y, x = _lift(z), _lift(y), _lift(x)
    if not (z.shape == y.shape == x.shape) or z.ndim < 2:
        raise ShapeMismatchError("rank1_sum", z.shape, y.shape if y.shape != z.shape else x.shape)
    out = np.einsum("...ai,...aj,...ak->...ijk", z.data, y.data, x.data, optimize=True)

    def backward(g):
        return (
            np.einsum("...ijk,...aj,...ak->...ai", g, y.data, x.data, optimize=True),
            np.einsum("...ijk,...ai,...ak->...aj", g, z.data, x.data, optimize=True),
            np.einsum("...ijk,...ai,...aj->...ak", g, z.data, y.data, optimize=True),
        )

    return _result("rank1_sum", out, (z, y, x), backward)


# -- convolutional -------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """x [B, C, H, W], weight [O, C, kh, kw] -> [B, O, H', W'] (cross-correlation)"""
    x, weight = _lift(x), _lift(weight)
    bias = None if bias is None else _lift(bias)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape)
    batch, _, height, width = x.shape
    out_channels, _, kh, kw = weight.shape
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape)
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (out_h - 1) + 1, stride),
                slice(j, j + stride * (out_w - 1) + 1, stride))

    out = np.zeros((batch, out_channels, out_h, out_w), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bchw,oc->bohw", padded[window(i, j)], weight.data[:, :, i, j], optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        grad_padded = np.zeros_like(padded)
        grad_w = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                grad_w[:, :, i, j] = np.einsum("bohw,bchw->oc", g, padded[window(i, j)], optimize=True)
                grad_padded[window(i, j)] += np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True)
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        grad_b = None if bias is None else g.sum(axis=(0, 2, 3))
        return (grad_x, grad_w) if bias is None else (grad_x, grad_w, grad_b)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, backward)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes; ties route to the first maximum"""
    x = _lift(x)
    *lead, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeMismatchError("max_pool2d", x.shape, (2, 2))
    blocks = x.data.reshape(*lead, height // 2, 2, width // 2, 2)
    n = len(lead)
    order = (*range(n), n, n + 2, n + 1, n + 3)
    flat = blocks.transpose(order).reshape(*lead, height // 2, width // 2, 4)
    winner = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
        routed = routed.reshape(*lead, height // 2, width // 2, 2, 2)
        inverse = tuple(np.argsort(order))
        return (routed.transpose(inverse).reshape(x.shape),)

    return _result("max_pool2d", out, (x,), backward)


# -- finite-difference checker -------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: Optional[Tuple[int, Tuple[int, ...]]]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-3,
                    tolerance: float = 1e-3, abs_floor: float = 1e-5,
                    samples: Optional[int] = None, seed: int = 0) -> GradCheckResult:
    """Compare tape gradients of a scalar function against central finite differences.

    Runs in float64. Entries whose absolute discrepancy is below `abs_floor` count as exact.
    With `samples`, only that many randomly chosen entries per input are perturbed.
    """
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        tape.backward(fn(*leaves))
        analytic = [tape.grad(leaf) for leaf in leaves]

        worst, max_rel, checked = None, 0.0, 0
        for which, array in enumerate(arrays):
            indices = list(np.ndindex(array.shape))
            if samples is not None and len(indices) > samples:
                picks = rng.choice(len(indices), size=samples, replace=False)
                indices = [indices[p] for p in sorted(picks)]
            for index in indices:
                original = array[index]
                array[index] = original + step
                plus = fn(*[Tensor(a) for a in arrays]).item()
                array[index] = original - step
                minus = fn(*[Tensor(a) for a in arrays]).item()
                array[index] = original
                numeric = (plus - minus) / (2 * step)
                exact = analytic[which][index]
                diff = abs(exact - numeric)
                checked += 1
                if diff <= abs_floor:
                    continue
                rel = diff / max(abs(exact), abs(numeric))
                if rel > max_rel:
                    max_rel, worst = rel, (which, index)
    return GradCheckResult(max_rel, checked, worst, tolerance)
