"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Everything above this module (encoders, attention, the velocity model, the
trainer) is written against `Tensor` and the op functions here. Arrays are
plain numpy; the tape is dynamic: each op output keeps links to its parents
plus a vjp closure, and `backward` walks the implied graph once in reverse
topological order.

Broadcasting is intentionally narrow: same-shape, scalar-with-tensor, a
[1, C] row against [N, C], and keepdims-style [..., 1] against [..., n].
Anything else raises. Gradients of broadcast operands are reduced back to
the operand shape by summation.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64
_grad_enabled = True


class DimensionError(ValueError):
    """Shape or dimensionality mismatch between operands."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff tape (e.g. backward on a non-scalar)."""


def set_default_dtype(name: str) -> None:
    """Set the dtype used for new tensors: "float64" (default) or "float32"."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / data plumbing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus optional gradient buffer and tape links.

    `grad` accumulates across repeated `backward` calls; call `zero_grad`
    (or `zero_grads` on a parameter list) between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"

    # -- gradient buffer -----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise GraphError(
                f"gradient shape {list(g.shape)} != tensor shape {list(self.shape)}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


@dataclass
class ComputeGraph:
    """Reverse-topologically ordered view of the tape reachable from a root.

    `nodes` lists every tensor on the path from `root` down to the leaves,
    root first; each node appears exactly once (acyclic by construction:
    ops only link to already-existing tensors).
    """

    root: Tensor
    nodes: list[Tensor] = field(default_factory=list)


def build_graph(root: Tensor) -> ComputeGraph:
    """Topologically order every tensor reachable from `root` via parent links."""
    order: list[Tensor] = []
    visited: set[int] = set()
    # Iterative DFS with an explicit post-visit marker; deep chains (long
    # training graphs) would blow the recursion limit otherwise.
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
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()  # root first
    return ComputeGraph(root=root, nodes=order)


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    `loss` must be scalar (size 1). Repeated calls accumulate into existing
    grads; zero them between optimization steps.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {list(loss.shape)}")
    graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in graph.nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._vjp is None:
            node._accumulate(g)
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not (parent.requires_grad or parent._vjp is not None):
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# -- construction ------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0,
          requires_grad: bool = False, dtype=None) -> Tensor:
    data = rng.standard_normal(shape) * std
    return Tensor(data.astype(dtype or _default_dtype), requires_grad)


# -- broadcasting helpers ----------------------------------------------


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    """Allow only shapes where every mismatched dim is 1 on one side."""
    if sa == sb:
        return
    ra, rb = len(sa), len(sb)
    r = max(ra, rb)
    pa = (1,) * (r - ra) + sa
    pb = (1,) * (r - rb) + sb
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {list(sa)} and {list(sb)} do not broadcast")


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        return Tensor(data, _parents=parents, _vjp=vjp)
    return Tensor(data)


# -- elementwise ops ----------------------------------------------------


def _binary(a, b, fwd, vjp_a, vjp_b) -> Tensor:
    # Python scalars stay raw so float32 arrays are not upcast (NEP 50);
    # the scalar side needs no gradient.
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        out = fwd(a.data, b)
        return _make(out, (a,),
                     lambda g: (_sum_to_shape(vjp_a(g, a.data, b, out), a.shape),))
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        out = fwd(a, b.data)
        return _make(out, (b,),
                     lambda g: (_sum_to_shape(vjp_b(g, a, b.data, out), b.shape),))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = fwd(a.data, b.data)

    def vjp(g):
        ga = _sum_to_shape(vjp_a(g, a.data, b.data, out), a.shape)
        gb = _sum_to_shape(vjp_b(g, a.data, b.data, out), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    out = a.data ** e
    return _make(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


# -- matmul --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors or two 3-D batches with equal batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(
            f"matmul supports 2-D x 2-D or batched 3-D x 3-D, got {list(a.shape)} x {list(b.shape)}"
        )
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    out = a.data @ b.data

    def vjp(g):
        at = np.swapaxes(a.data, -1, -2)
        bt = np.swapaxes(b.data, -1, -2)
        return g @ bt, at @ g

    return _make(out, (a, b), vjp)


# -- shape ops -----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), vjp)


def stack(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [reshape(t, (1,) + _as_tensor(t).shape) for t in tensors]
    return concat(ts, axis=0)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice `[start, start+length)` along one axis."""
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {list(a.shape)}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), vjp)


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0
                    else np.full(a.shape, g.reshape(()), dtype=a.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- fused numerically-guarded ops -----------------------------------------


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis, guarded by max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), vjp)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a [V, C] table by an integer id array.

    Output shape is `ids.shape + (C,)`; the backward pass scatter-adds.
    """
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {list(table.shape)}")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), vjp)


# -- gradient checking -------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-4, max_probes: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map `x` to a scalar Tensor. When `max_probes` is given, that many
    coordinates are probed (chosen via `rng`, defaulting to a fixed seed);
    otherwise every coordinate is probed. Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.data = np.ascontiguousarray(x.data)  # probes mutate through a flat view
    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.requires_grad = was

    n = x.size
    if max_probes is None or max_probes >= n:
        coords = np.arange(n)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_probes, replace=False)

    flat = x.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = f(x).item()
            flat[c] = orig - eps
            lo = f(x).item()
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic_flat[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- binary serialization ------------------------------------------------------

# Layout: little-endian u32 rank, u32 per dim, then the raw float payload.
# The payload's element width (4 or 8 bytes) is recovered from the file size.


def tensor_to_bytes(arr) -> bytes:
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if data.dtype not in (np.float32, np.float64):
        data = data.astype(_default_dtype)
    header = struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    if data.dtype == np.float32:
        payload = data.astype("<f4").tobytes()
    else:
        payload = data.astype("<f8").tobytes()
    return header + payload


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", raw, 0)
    need = 4 + 4 * rank
    if len(raw) < need:
        raise ValueError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 4)
    count = int(np.prod(dims)) if rank else 1
    body = len(raw) - need
    if count > 0 and body % count == 0 and body // count in (4, 8):
        width = body // count
    elif count == 0:
        width = 8
    else:
        raise ValueError(f"payload of {body} bytes does not fit {dims}")
    dtype = "<f4" if width == 4 else "<f8"
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=need)
    return arr.reshape(dims).copy()


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
