"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array. Operations record a backward
closure only when at least one input requires a gradient, so frozen
sub-graphs cost nothing at backward time.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.flags.writeable and g.base is None else np.array(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims: (..., m, k)^T (..., m, n) summed over batch
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                _accum(b, gb)
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shp = x.shape
    y = kernels.softmax_fwd(x.data.reshape(-1, shp[-1])).reshape(shp)

    def bw(g):
        _accum(x, kernels.softmax_bwd(y.reshape(-1, shp[-1]),
                                      np.ascontiguousarray(g).reshape(-1, shp[-1])).reshape(shp))

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optional elementwise affine."""
    shp = x.shape
    n = shp[-1]
    for p, label in ((weight, "weight"), (bias, "bias")):
        if p is not None and p.shape != (n,):
            raise ShapeError(f"layer_norm: {label} shape {p.shape} != ({n},)")
    xhat2, rstd = kernels.layernorm_fwd(x.data.reshape(-1, n), eps)
    xhat = xhat2.reshape(shp)
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (x, weight, bias) if p is not None)

    def bw(g):
        if weight is not None and weight.requires_grad:
            _accum(weight, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * weight.data if weight is not None else g
            gx = np.ascontiguousarray(gx).reshape(-1, n)
            _accum(x, kernels.layernorm_bwd(xhat2, rstd, gx).reshape(shp))

    return _make(out, parents, bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    shp = x.shape
    x2 = x.data.reshape(-1, shp[-1]) if x.ndim else x.data.reshape(1, 1)
    y = kernels.gelu_fwd(x2).reshape(shp)

    def bw(g):
        _accum(x, kernels.gelu_bwd(x2, np.ascontiguousarray(g).reshape(x2.shape)).reshape(shp))

    return _make(y, (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, gt)

    return _make(table.data[ids], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in items)


def slice_(x: Tensor, key) -> Tensor:
    out = x.data[key]
    basic = _is_basic_key(key)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        _accum(x, gx)

    return _make(np.array(out), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2) if x.ndim >= 2 else (0,)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))

    def bw(g):
        _accum(x, np.ascontiguousarray(np.transpose(g, inv)))

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / count, x.shape).copy())

    return _make(out, (x,), bw)


def scatter_add_rows(base: Tensor, index, values: Tensor) -> Tensor:
    """Return ``base`` with ``values`` added to the rows selected by ``index``.

    ``base`` is (B, N, d); ``index`` is (B, n) of row positions, unique per
    batch entry; ``values`` is (B, n, d). Rows outside ``index`` are copied
    bit-for-bit.
    """
    index = np.asarray(index, dtype=np.int64)
    if base.ndim != 3 or values.ndim != 3:
        raise ShapeError(f"scatter_add_rows: expected 3-D base/values, got {base.shape}, {values.shape}")
    B, N, d = base.shape
    if index.shape != values.shape[:2] or values.shape[0] != B or values.shape[2] != d:
        raise ShapeError(f"scatter_add_rows: index {index.shape} / values {values.shape} "
                         f"incompatible with base {base.shape}")
    if index.size:
        if index.min() < 0 or index.max() >= N:
            raise ShapeError(f"scatter_add_rows: row index out of range [0, {N})")
        srt = np.sort(index, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise ShapeError("scatter_add_rows: overlapping row indices")
    rows = np.arange(B)[:, None]
    out = base.data.copy()
    out[rows, index] += values.data

    def bw(g):
        _accum(base, g)
        if values.requires_grad:
            _accum(values, g[rows, index])

    return _make(out, (base, values), bw)


def gather_rows(x: Tensor, index) -> Tensor:
    """Pick one row per batch entry: (B, N, d), (B,) -> (B, d)."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: x {x.shape} with index {index.shape}")
    if index.min() < 0 or index.max() >= x.shape[1]:
        raise ShapeError(f"gather_rows: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        _accum(x, gx)

    return _make(x.data[rows, index], (x,), bw)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean softmax cross-entropy over positions where ``mask`` is nonzero."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}, "
                         f"mask {mask.shape} misaligned")
    count = float(mask.sum())
    if count <= 0:
        raise ValueError("cross_entropy: empty loss mask")
    flat_t = np.where(mask.reshape(-1) > 0, targets.reshape(-1), 0)
    if flat_t.size and (flat_t.min() < 0 or flat_t.max() >= V):
        raise ShapeError(f"cross_entropy: target ids out of range [0, {V})")
    weights = np.ascontiguousarray(mask.reshape(-1) / count)
    total, glog = kernels.xent_fwd_bwd(logits.data.reshape(-1, V), flat_t, weights)

    def bw(g):
        _accum(logits, (glog * float(g)).reshape(logits.shape))

    return _make(np.asarray(total), (logits,), bw)


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it with d(loss)/d(leaf)."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior nodes keep no gradient once propagated
            node.grad = None


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "embedding": embedding,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": slice_,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "scatter_add_rows": scatter_add_rows,
    "gather_rows": gather_rows,
    "cross_entropy": cross_entropy,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)
