"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations performed while a :class:`Tape` is active, and touching at least
one tensor with ``requires_grad``, are recorded in creation order.  Because a
node can only be created after its inputs exist, that order is already
topological and :func:`backward` simply replays it in reverse.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape():
    ...     y = x.square().sum()
    >>> backward(y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradCheckError",
    "backward",
    "grad_check",
    "no_tape",
    "concat",
    "stack",
    "dense",
    "conv2d",
    "avg_pool2d",
    "softmax",
    "matmul",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's rule."""


class GradCheckError(ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


_TAPES: list = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording, even inside an enclosing tape."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp", "needs")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        # frozen inputs stay frozen for this graph even if unfrozen before backward
        self.needs = tuple(t.requires_grad for t in inputs)


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes]

    def backward(self, loss):
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        backward(loss)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, inputs, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._node = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, out, inputs, vjp)
        tape.nodes.append(node)
        out._node = node
        out._tape = tape
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, "div", (a, b), vjp)


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data**p, "pow", (a,), vjp)


def square(a):
    a = as_tensor(a)

    def vjp(g):
        return (2.0 * a.data * g,)

    return _result(a.data * a.data, "square", (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (0.5 * g / out,)

    return _result(out, "sqrt", (a,), vjp)


def abs_(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), "abs", (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _result(out, "exp", (a,), vjp)


def log(a):
    a = as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _result(np.log(a.data), "log", (a,), vjp)


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, "sigmoid", (a,), vjp)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _result(out, "tanh", (a,), vjp)


def relu(a):
    a = as_tensor(a)
    on = a.data > 0

    def vjp(g):
        return (g * on,)

    return _result(np.where(on, a.data, 0.0), "relu", (a,), vjp)


def clip_grad(a, max_norm, axes=(-2, -1)):
    """Identity forward; backward rescales each slice over ``axes`` to norm <= ``max_norm``.

    Not a true derivative: used to bound the pull of individual samples
    on the parameters, so grad_check only agrees where no slice is capped.
    """
    a = as_tensor(a)
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")

    def vjp(g):
        norm = np.sqrt(np.sum(g * g, axis=axes, keepdims=True))
        factor = np.ones_like(norm)
        over = norm > max_norm
        factor[over] = max_norm / norm[over]
        return (g * factor,)

    return _result(a.data.copy(), "clip_grad", (a,), vjp)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims) / n

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), "mean", (a,), vjp)


def max_(a, axis=None, keepdims=False):
    """Maximum over ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def vjp(g):
        g = np.asarray(g).reshape(lead)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return _result(np.asarray(out, dtype=DTYPE), "max", (a,), vjp)


# ---------------------------------------------------------------- structure


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _result(out, "reshape", (a,), vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), "transpose", (a,), vjp)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def slice_(a, index):
    a = as_tensor(a)
    basic = _is_basic_index(index)
    try:
        out = a.data[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} (shape {a.shape})") from None

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), "slice", (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(
        np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), vjp
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shape = list(tensors[0].shape)
    ax = axis % (len(shape) + 1)
    shape.insert(ax, 1)
    return concat([reshape(t, tuple(shape)) for t in tensors], axis=ax)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) "
            f"for shapes {a.shape} and {b.shape}"
        )

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, "matmul", (a, b), vjp)


def dense(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"dense: input width {x.shape[-1]} does not match weight {weight.shape}"
        )
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[1]))
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        return gx, x2.T @ g2, g2.sum(axis=0)

    out = (x2 @ weight.data + bias.data).reshape(x.shape[:-1] + (weight.shape[1],))
    return _result(out, "dense", (x, weight, bias), vjp)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), vjp)


def conv2d(x, weight, bias=None, padding=0):
    """Stride-1 cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is None:
        bias = Tensor(np.zeros(o))
    bias = as_tensor(bias)
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # b c ho wo kh kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T + bias.data).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + ho, j : j + wo, :] += gcols[:, :, :, :, i, j]
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw, gb

    return _result(out, "conv2d", (x, weight, bias), vjp)


def avg_pool2d(x, kernel):
    """Non-overlapping average pooling over the last two axes."""
    x = as_tensor(x)
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    if x.ndim < 2:
        raise ShapeError(f"avg_pool2d: need at least 2-D input, got {x.shape}")
    h, w = x.shape[-2:]
    if h % kh or w % kw:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by kernel {kh}x{kw}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // kh, kh, w // kw, kw)).mean(axis=(-3, -1))

    def vjp(g):
        g = np.repeat(np.repeat(g, kh, axis=-2), kw, axis=-1)
        return (g / (kh * kw),)

    return _result(out, "avg_pool2d", (x,), vjp)


# ---------------------------------------------------------------- backward


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad and loss.is_leaf:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
            return
        raise ValueError("loss was not produced under an active tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(loss._tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, need, gi in zip(node.inputs, node.needs, node.vjp(g)):
            if gi is None or not need:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi


def grad_check(function, point, epsilon=1e-5, indices=None):
    """Largest relative error between reverse-mode and central-difference gradients.

    ``indices`` restricts the comparison to a subset of flat coordinates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    saved_flag, saved_grad = point.requires_grad, point.grad
    point.requires_grad = True
    point.grad = np.zeros_like(point.data)
    try:
        with Tape():
            y = function(point)
        if not np.all(np.isfinite(y.data)):
            raise GradCheckError("function value is not finite at the base point")
        backward(y)
        analytic = point.grad.reshape(-1).copy()
    finally:
        point.requires_grad, point.grad = saved_flag, saved_grad

    flat = point.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_tape():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(function(point).data.reshape(-1)[0])
            flat[i] = orig - epsilon
            fm = float(function(point).data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite function value at coordinate {i}", index=i)
            numeric = (fp - fm) / (2.0 * epsilon)
            a = analytic[i]
            if not np.isfinite(a):
                raise GradCheckError(f"non-finite analytic gradient at coordinate {i}", index=i)
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
