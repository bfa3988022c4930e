"""Dense tensors with reverse-mode automatic differentiation.

Every array-valued op records a closure that maps the output gradient back to
its inputs. ``Tensor.backward`` walks the graph in reverse topological order
and accumulates gradients into ``.grad`` of every tensor that requires them.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for tensors built from Python scalars/lists."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager that temporarily changes the default dtype.

    >>> with precision(np.float64):
    ...     t = Tensor([1.0])
    """

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out dimensions that numpy broadcasting expanded.
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional array that can participate in autodiff graphs."""

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Back-propagate from this tensor.

        ``grad`` defaults to ones, which for a scalar loss gives d(loss)/d(leaf).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operator sugar ---------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (np.ndarray, np.generic)) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: ((a, g / b.data), (b, -g * out / b.data)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: ((x, g * out),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: ((x, g / x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: ((x, g * 0.5 / out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: ((x, g * (1.0 - out * out)),))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: ((x, g * out * (1.0 - out)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: ((x, g * mask),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data >= floor
    out = np.where(mask, x.data, x.data.dtype.type(floor))
    return _make(out, (x,), lambda g: ((x, g * mask),))


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors (or a batch of rows times a matrix)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ((a, ga), (b, gb))

    return _make(a.data @ b.data, (a, b), backward)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` for explicit-output subscripts.

    Operands may not repeat an index internally. Indices that appear only in
    one operand and not in the output are summed; their gradient is a
    broadcast of the incoming gradient.
    """
    operands = tuple(as_tensor(o) for o in operands)
    if "->" not in subscripts:
        raise ValueError("einsum requires an explicit output ('->')")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    for sub_, op in zip(in_subs, operands):
        if len(sub_) != op.ndim:
            raise DimensionError(f"einsum: subscript {sub_!r} does not match shape {op.shape}")
        if len(set(sub_)) != len(sub_):
            raise ValueError(f"einsum: repeated index within operand {sub_!r}")
    try:
        out = np.einsum(subscripts, *(o.data for o in operands), optimize=True)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts}: {exc} (shapes {[o.shape for o in operands]})") from None

    def backward(g):
        result = []
        for k, (sub_k, op_k) in enumerate(zip(in_subs, operands)):
            if not op_k.requires_grad:
                continue
            others = [(s, o.data) for i, (s, o) in enumerate(zip(in_subs, operands)) if i != k]
            available = set(out_sub).union(*(set(s) for s, _ in others)) if others else set(out_sub)
            kept = "".join(ch for ch in sub_k if ch in available)
            spec = ",".join([out_sub] + [s for s, _ in others]) + "->" + kept
            gk = np.einsum(spec, g, *(d for _, d in others), optimize=True)
            if kept != sub_k:
                # Indices summed only within this operand: broadcast back.
                shape = [op_k.shape[i] if ch in kept else 1 for i, ch in enumerate(sub_k)]
                gk = np.broadcast_to(gk.reshape(shape), op_k.shape)
            result.append((op_k, np.ascontiguousarray(gk)))
        return result

    return _make(out, operands, backward)


# -- shape ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: ((x, g.reshape(x.shape)),))


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    """Collapse every axis from ``start_axis`` onward into one."""
    lead = x.shape[:start_axis]
    return reshape(x, lead + (-1,))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: ((x, np.transpose(g, inv)),))


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return ((x, full),)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            parts.append((t, g[tuple(sl)]))
        return parts

    return _make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(axis, 1)
    return reshape(x, tuple(shape))


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _restore(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (x,), lambda g: ((x, _restore(g, x.shape, axes, keepdims)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(
        np.asarray(out, dtype=x.dtype),
        (x,),
        lambda g: ((x, _restore(g, x.shape, axes, keepdims) / count),),
    )


def max_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; tied maxima share the gradient equally."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out_k = x.data.max(axis=axes, keepdims=True)
    mask = (x.data == out_k).astype(x.dtype)
    mask /= mask.sum(axis=axes, keepdims=True)
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return ((x, gk * mask),)

    return _make(np.asarray(out), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _norm_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - dot)),)

    return _make(out, (x,), backward)


# -- pooling helpers ------------------------------------------------------

_POOL_AXES = {"spatial": (-3, -2), "channel": (-1,)}


def _pool_axes(over: str) -> tuple:
    try:
        return _POOL_AXES[over]
    except KeyError:
        raise ValueError(f"pool axis selector must be 'spatial' or 'channel', got {over!r}") from None


def global_avg_pool(f: Tensor, over: str = "spatial") -> Tensor:
    """Mean over the spatial axes (``...×h×w×c → ...×c``) or the channel axis
    (``...×h×w×c → ...×h×w×1``)."""
    axes = _pool_axes(over)
    return mean(f, axis=tuple(a % f.ndim for a in axes), keepdims=(over == "channel"))


def global_max_pool(f: Tensor, over: str = "spatial") -> Tensor:
    axes = _pool_axes(over)
    return max_(f, axis=tuple(a % f.ndim for a in axes), keepdims=(over == "channel"))


# -- convolution ----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution with kernel ``w`` of shape (kh, kw, c_in, c_out).

    Implemented as kh·kw strided slices each multiplied by one kernel tap, so
    neither pass builds an im2col buffer.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    b, h, wd, _ = x.shape
    kh, kw, cin, cout = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {w.shape[:2]} larger than padded input {xp.shape[1:3]}")

    def tap(arr, i, j):
        return arr[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]

    out = np.zeros((b, ho, wo, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += tap(xp, i, j) @ w.data[i, j]

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = np.empty_like(w.data) if w.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gw is not None:
                    gw[i, j] = tap(xp, i, j).reshape(-1, cin).T @ g2
                if gxp is not None:
                    tap(gxp, i, j)[...] += g @ w.data[i, j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, padding : padding + h, padding : padding + wd, :] if padding else gxp
        return ((x, gx), (w, gw))

    return _make(out, (x, w), backward)


# -- regularizers and losses ---------------------------------------------


def gaussian_noise_std(rho: float) -> float:
    """Standard deviation of the multiplicative noise for dropout rate ``rho``."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= rho < 1, got {rho}")
    return math.sqrt(rho / (1.0 - rho))


def gaussian_dropout(x: Tensor, rho: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Multiply by Normal(1, sigma^2) noise in training; identity otherwise."""
    sigma = gaussian_noise_std(rho)
    if not training or sigma == 0.0:
        return x
    if rng is None:
        raise ValueError("gaussian_dropout in training mode needs an rng")
    noise = rng.normal(1.0, sigma, size=x.shape).astype(x.dtype)
    return mul(x, Tensor(noise))


def bernoulli_dropout(x: Tensor, rho: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability ``rho``, rescale survivors."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= rho < 1, got {rho}")
    if not training or rho == 0.0:
        return x
    if rng is None:
        raise ValueError("bernoulli_dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rho).astype(x.dtype) / (1.0 - rho)
    return mul(x, Tensor(keep))


class LabelError(ValueError):
    pass


def cross_entropy(y_pred: Tensor, y_true, floor: float = 1e-12) -> Tensor:
    """Mean negative log-probability of the true class.

    ``y_pred`` holds probabilities (rows from a softmax), not logits.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    if y_pred.ndim != 2 or y_pred.shape[0] != y_true.shape[0]:
        raise DimensionError(f"cross_entropy: predictions {y_pred.shape} vs {y_true.shape[0]} labels")
    n_classes = y_pred.shape[1]
    if y_true.size and (y_true.min() < 0 or y_true.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}); got range [{y_true.min()}, {y_true.max()}]")
    picked = getitem(y_pred, (np.arange(y_true.shape[0]), y_true))
    return mul(mean(log(clamp_min(picked, floor))), -1.0)
