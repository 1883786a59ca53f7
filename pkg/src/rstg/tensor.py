"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output
gradient to per-parent gradients.  ``backward(loss)`` walks the recorded
graph in reverse topological order, buffering gradients for interior nodes
and accumulating them into ``.grad`` on the leaves.

Training normally runs in float32; gradient checking and bit-exact
evaluation switch the whole engine to float64 through ``precision(...)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "backward",
    "concat",
    "concat_n",
    "split",
    "stack",
    "elementwise",
    "reduce",
    "matmul",
    "take_rows",
    "segment_sum",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "precision",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "set_finite_checks",
    "uniform_init",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_state = {
    "dtype": np.float32,
    "grad_enabled": True,
    "finite_checks": True,
}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily run the whole engine at the given float precision."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied to every op output."""
    _state["finite_checks"] = bool(enabled)


def _check_finite(data: np.ndarray, op: str) -> None:
    if _state["finite_checks"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


# A backward closure maps the output gradient to one gradient per parent
# (None for parents that need no gradient).  Closures must not mutate their
# argument; the engine never mutates what they return.
BackwardFn = Callable[[np.ndarray], tuple]


class Tensor:
    """N-dimensional real array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[BackwardFn] = None
        self._op = ""

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward_fn: BackwardFn, op: str) -> "Tensor":
        """Build the output tensor of a primitive op."""
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out._op = op
        if _state["grad_enabled"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> Optional[np.ndarray]:
        """Gradient buffer; present (and same-shape) iff requires_grad."""
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if value is None:
            self._grad = None
            return
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return _add(self, _as_tensor(other))

    def __radd__(self, other):
        return _add(_as_tensor(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_as_tensor(other)))

    def __rsub__(self, other):
        return _add(_as_tensor(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return _mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    # -- method forms ------------------------------------------------------------

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims=keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, axes=None):
        return _transpose(self, axes)

    @property
    def T(self):
        return _transpose(self, None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a hierarchical name.

    ``init_info`` records how the values were drawn (distribution, bounds,
    seed) so an initialization scheme is reproducible from saved metadata.
    """

    __slots__ = ("name", "init_info")

    def __init__(self, data, name: str, init_info: Optional[dict] = None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init_info = dict(init_info or {})

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str) -> Parameter:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    data = rng.uniform(-bound, bound, size=shape)
    info = {"distribution": "uniform", "low": -bound, "high": bound,
            "fan_in": int(fan_in)}
    return Parameter(data, name, init_info=info)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ops --------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return Tensor.from_op(a.data + b.data, (a, b), backward_fn, "add")


def _neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(a.data * b.data, (a, b), backward_fn, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * data / b.data, b.shape))

    return Tensor.from_op(data, (a, b), backward_fn, "div")


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D tensors; backward is dA = dC Bᵀ, dB = Aᵀ dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")

    def backward_fn(g):
        return (g @ b.data.T, a.data.T @ g)

    return Tensor.from_op(a.data @ b.data, (a, b), backward_fn, "matmul")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(over="ignore"):
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                       np.exp(x) / (1.0 + np.exp(x)))
    out = out.astype(x.dtype, copy=False)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.maximum(a.data, 0.0), (a,),
                          lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


_ELEMENTWISE_BINARY = {"add": _add, "mul": _mul}
_ELEMENTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def _check_elementwise_shapes(a: Tensor, b: Tensor) -> None:
    # Contract: equal shapes, a scalar operand, or a vector broadcast over rows.
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    vec, other = (a, b) if a.ndim == 1 else (b, a)
    if vec.ndim == 1 and other.ndim >= 1 and vec.shape[0] == other.shape[-1]:
        return
    raise ShapeError(f"incompatible shapes for elementwise op: {a.shape} vs {b.shape}")


def elementwise(op_tag: str, a, b=None) -> Tensor:
    """Tag-dispatched elementwise op (add, mul, sigmoid, tanh, relu)."""
    a = _as_tensor(a)
    if op_tag in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"op '{op_tag}' needs two operands")
        b = _as_tensor(b)
        _check_elementwise_shapes(a, b)
        return _ELEMENTWISE_BINARY[op_tag](a, b)
    if op_tag in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"op '{op_tag}' is unary")
        return _ELEMENTWISE_UNARY[op_tag](a)
    known = sorted(_ELEMENTWISE_BINARY) + sorted(_ELEMENTWISE_UNARY)
    raise ValueError(f"unknown elementwise op '{op_tag}'; known: {known}")


# -- reductions --------------------------------------------------------------------


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(ax) for ax in axes)
    axes = tuple(ax + ndim if ax < 0 else ax for ax in axes)
    for ax in axes:
        if ax < 0 or ax >= ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(axes))


def reduce(op_tag: str, a, axes=None, keepdims: bool = False) -> Tensor:
    """Reduction over the given axes: sum, mean, or max.

    Mean scales the broadcast adjoint by 1/count; max routes the gradient to
    the winning element, breaking ties towards the lowest flat index.
    """
    a = _as_tensor(a)
    if axes is not None and not isinstance(axes, (int, np.integer)) and len(axes) == 0:
        raise ShapeError("empty reduction set")
    axes = _normalize_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise ShapeError("empty reduction set")

    if op_tag in ("sum", "mean"):
        data = a.data.sum(axis=axes if axes else None, keepdims=keepdims)
        scale = 1.0 / count if op_tag == "mean" else 1.0
        if op_tag == "mean":
            data = data * scale

        def backward_fn(g):
            gx = g if (keepdims or not axes) else np.expand_dims(g, axes)
            return (np.broadcast_to(gx * scale, a.shape),)

        return Tensor.from_op(np.asarray(data), (a,), backward_fn, op_tag)

    if op_tag == "max":
        # Move reduced axes last so each reduction group is one contiguous
        # row-major block; argmax then picks the lowest flat index on ties.
        kept = tuple(ax for ax in range(a.ndim) if ax not in axes)
        moved = np.transpose(a.data, kept + axes)
        kept_shape = moved.shape[: len(kept)]
        flat = moved.reshape(kept_shape + (count,))
        arg = np.argmax(flat, axis=-1)
        data = np.take_along_axis(flat, np.expand_dims(arg, -1), axis=-1).squeeze(-1)
        out_data = np.expand_dims(data, axes) if (keepdims and axes) else data

        def backward_fn(g):
            gflat = np.asarray(g).reshape(kept_shape)
            gmoved = np.zeros_like(flat)
            np.put_along_axis(gmoved, np.expand_dims(arg, -1),
                              np.expand_dims(gflat, -1), axis=-1)
            reduced_shape = tuple(a.shape[ax] for ax in axes)
            gmoved = gmoved.reshape(kept_shape + reduced_shape)
            inv = np.argsort(kept + axes)
            return (np.transpose(gmoved, inv),)

        return Tensor.from_op(np.asarray(out_data), (a,), backward_fn, "max")

    raise ValueError(f"unknown reduce op '{op_tag}'; known: ['max', 'mean', 'sum']")


# -- shape ops ----------------------------------------------------------------------


def concat(a, b, axis: int = 0) -> Tensor:
    """Concatenate two tensors along ``axis``; backward splits the gradient."""
    return concat_n([_as_tensor(a), _as_tensor(b)], axis)


def concat_n(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ndim = tensors[0].ndim
    if axis < -ndim or axis >= ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    axis %= ndim
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] != base[:axis] \
                or t.shape[axis + 1:] != base[axis + 1:]:
            raise ShapeError(f"concat shape mismatch off axis {axis}: "
                             f"{base} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(data, tuple(tensors), backward_fn, "concat")


def split(a, sizes: Sequence[int], axis: int = 0) -> list:
    """Split along ``axis`` into chunks of the given sizes (inverse of concat)."""
    a = _as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} "
                         f"of shape {a.shape}")
    outs = []
    start = 0
    for size in sizes:
        outs.append(_slice_axis(a, axis, start, start + size))
        start += size
    return outs


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack tensors along a new axis."""
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [_reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat_n(expanded, axis)


def _slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = tuple(slice(start, stop) if d == axis else slice(None)
                  for d in range(a.ndim))

    def backward_fn(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return (buf,)

    return Tensor.from_op(a.data[index].copy(), (a,), backward_fn, "slice")


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    def backward_fn(g):
        return (g.reshape(a.shape),)

    return Tensor.from_op(a.data.reshape(shape), (a,), backward_fn, "reshape")


def _transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes) if axes is not None else None

    def backward_fn(g):
        return (np.transpose(g, inv),)

    return Tensor.from_op(np.transpose(a.data, axes), (a,), backward_fn, "transpose")


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward_fn(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return Tensor.from_op(a.data[idx], (a,), backward_fn, "take_rows")


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by segment_ids.

    Summation follows the row order of ``a``; callers needing bit-exact
    order independence must canonicalize row order first.
    """
    a = _as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_ids length {ids.shape[0]} != rows {a.shape[0]}")
    data = np.zeros((num_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(data, ids, a.data)

    def backward_fn(g):
        return (g[ids],)

    return Tensor.from_op(data, (a,), backward_fn, "segment_sum")


# -- reverse sweep --------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into ``.grad`` of every reachable leaf with
    ``requires_grad``; repeated calls without ``zero_grad`` keep accumulating.
    Interior gradients are buffered per call, so a second sweep over the same
    graph adds exactly one more unit of gradient to each leaf.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in _reverse_topo(loss):
        g = buffers.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward_fn is None and not parent._parents:
                # Leaf: accumulate persistently.
                parent._grad = pg.copy() if parent._grad is None else parent._grad + pg
            else:
                held = buffers.get(id(parent))
                buffers[id(parent)] = pg if held is None else held + pg


def _reverse_topo(root: Tensor) -> list:
    """Nodes below ``root`` ordered root-first (iterative post-order DFS)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order
