"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; this module supplies the differentiable op set
and the tape machinery on top. Every op records a TapeEntry on its output,
holding references to the input tensors and a closure that maps the output
adjoint to input adjoints. ``backward(loss)`` assembles the Tape for one
forward pass by walking the graph from the loss and replays the entries in
reverse. There is no global recording state: the graph a tensor belongs to
is exactly the entries reachable from it.

Float32 and float64 are both supported; an op never silently mixes them.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_operand(x, dtype: np.dtype) -> np.ndarray:
    """Coerce a python scalar / ndarray operand to a plain array of `dtype`."""
    arr = np.asarray(x, dtype=dtype)
    return arr


class TapeEntry:
    """One recorded operation: the inputs and the adjoint rule.

    The entry deliberately holds no reference to its output tensor (the
    output holds the entry), keeping the graph cycle-free so a finished
    forward pass is reclaimed by reference counting alone.
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple["Tensor | None", ...],
                 backward: Callable[[np.ndarray], tuple]) -> None:
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """(tensor, entry) pairs topologically sorted, producers first."""

    __slots__ = ("entries",)

    def __init__(self, entries: list[tuple["Tensor", TapeEntry]]) -> None:
        self.entries = entries

    @classmethod
    def trace(cls, root: "Tensor") -> "Tape":
        """Collect the entries reachable from `root` in topological order."""
        entries: list[tuple[Tensor, TapeEntry]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                if tensor.entry is not None:
                    entries.append((tensor, tensor.entry))
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            if tensor.entry is not None:
                for parent in tensor.entry.inputs:
                    if parent is not None and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(entries)


class Tensor:
    """A dense float array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "entry")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.entry: TapeEntry | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # arithmetic sugar; all dispatch to module-level ops
    def __add__(self, other): return add(self, other)
    __radd__ = __add__
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    __rmul__ = __mul__
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def reshape(self, *shape): return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def sum(self, axis=None, keepdims=False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tensor_mean(self, axis, keepdims)


def _scalar_error(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing the axes numpy broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _record(op: str, data: np.ndarray, inputs: Sequence, backward) -> Tensor:
    """Build the output tensor; attach a TapeEntry if any input needs grad.

    `inputs` keeps one slot per operand, None for non-Tensor operands, so
    the grads a backward returns line up with the operands positionally.
    """
    out = Tensor(data)
    if any(t is not None and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.entry = TapeEntry(op, tuple(inputs), backward)
    return out


def _pair(op: str, a, b) -> tuple[Tensor | None, Tensor | None, np.ndarray, np.ndarray, np.dtype]:
    """Normalize a binary op's operands; at least one must be a Tensor."""
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None and tb is None:
        raise ContractError(f"{op}: at least one operand must be a Tensor")
    if ta is not None and tb is not None and ta.dtype != tb.dtype:
        raise ContractError(f"{op}: mixed dtypes {ta.dtype.name} vs {tb.dtype.name}")
    dtype = (ta or tb).dtype
    da = ta.data if ta is not None else _as_operand(a, dtype)
    db = tb.data if tb is not None else _as_operand(b, dtype)
    return ta, tb, da, db, dtype


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    ta, tb, da, db, _ = _pair("add", a, b)
    def bwd(g):
        return (_unbroadcast(g, da.shape) if ta is not None and ta.requires_grad else None,
                _unbroadcast(g, db.shape) if tb is not None and tb.requires_grad else None)
    return _record("add", da + db, (ta, tb), bwd)


def sub(a, b) -> Tensor:
    ta, tb, da, db, _ = _pair("sub", a, b)
    def bwd(g):
        return (_unbroadcast(g, da.shape) if ta is not None and ta.requires_grad else None,
                _unbroadcast(-g, db.shape) if tb is not None and tb.requires_grad else None)
    return _record("sub", da - db, (ta, tb), bwd)


def mul(a, b) -> Tensor:
    ta, tb, da, db, _ = _pair("mul", a, b)
    def bwd(g):
        return (_unbroadcast(g * db, da.shape) if ta is not None and ta.requires_grad else None,
                _unbroadcast(g * da, db.shape) if tb is not None and tb.requires_grad else None)
    return _record("mul", da * db, (ta, tb), bwd)


def div(a, b) -> Tensor:
    ta, tb, da, db, _ = _pair("div", a, b)
    def bwd(g):
        ga = _unbroadcast(g / db, da.shape) if ta is not None and ta.requires_grad else None
        gb = _unbroadcast(-g * da / (db * db), db.shape) if tb is not None and tb.requires_grad else None
        return ga, gb
    return _record("div", da / db, (ta, tb), bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    # tanh-form gelu; the backward below differentiates this exact expression
    x = a.data
    u = _GELU_C * (x + _GELU_A * (x * x * x))
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)
    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
    return _record("gelu", out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record("absolute", np.abs(a.data), (a,), lambda g: (g * sign,))


def maximum(a, b) -> Tensor:
    ta, tb, da, db, _ = _pair("maximum", a, b)
    mask = da >= db  # ties route the gradient to the first operand
    def bwd(g):
        return (_unbroadcast(g * mask, da.shape) if ta is not None and ta.requires_grad else None,
                _unbroadcast(g * ~mask, db.shape) if tb is not None and tb.requires_grad else None)
    return _record("maximum", np.maximum(da, db), (ta, tb), bwd)


def minimum(a, b) -> Tensor:
    ta, tb, da, db, _ = _pair("minimum", a, b)
    mask = da <= db
    def bwd(g):
        return (_unbroadcast(g * mask, da.shape) if ta is not None and ta.requires_grad else None,
                _unbroadcast(g * ~mask, db.shape) if tb is not None and tb.requires_grad else None)
    return _record("minimum", np.minimum(da, db), (ta, tb), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shaping

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ta, tb, da, db, _ = _pair("matmul", a, b)
    if da.ndim < 2 or db.ndim < 2:
        raise DimensionError("matmul", da.shape, db.shape)
    if da.shape[-1] != db.shape[-2]:
        raise DimensionError("matmul", da.shape, db.shape)
    out = np.matmul(da, db)
    def bwd(g):
        ga = gb = None
        if ta is not None and ta.requires_grad:
            ga = _unbroadcast(np.matmul(g, db.swapaxes(-1, -2)), da.shape)
        if tb is not None and tb.requires_grad:
            gb = _unbroadcast(np.matmul(da.swapaxes(-1, -2), g), db.shape)
        return ga, gb
    return _record("matmul", out, (ta, tb), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    dtype = tensors[0].dtype
    if any(t.dtype != dtype for t in tensors):
        raise ContractError("concat: mixed dtypes")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    def bwd(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _record("concat", out, tuple(tensors), bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def bwd(g):
        gg = g if axis is None or keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)
    return _record("sum", out, (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)
    def bwd(g):
        gg = g if axis is None or keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape) / count,)
    return _record("mean", out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _record("softmax", out, (a,), bwd)


_LN_EPS = 1e-6


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (eps 1e-6)."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    out = xc * inv
    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)
    return _record("layer_norm", out, (a,), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]
    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)
    return _record("embedding_lookup", out, (table,), bwd)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; the adjoint scatter-adds duplicate indices."""
    idx = np.asarray(indices)
    axis = axis % a.ndim
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("take: indices must be integers")
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ContractError(f"take: index out of range for axis {axis} of length {a.shape[axis]}")
    out = np.take(a.data, idx, axis=axis)
    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)
    return _record("take", out, (a,), bwd)


def cross_entropy_with_targets(logits: Tensor, targets, axis: int = -1) -> Tensor:
    """Per-row H(targets, softmax(logits)); targets are fixed distributions."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError("cross_entropy_with_targets", logits.shape, y.shape)
    sums = y.sum(axis=axis)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ContractError("cross_entropy_with_targets: target rows must sum to 1")
    x = logits.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    se = e.sum(axis=axis, keepdims=True)
    lse = np.log(se) + m
    out = (y * (lse - x)).sum(axis=axis)
    def bwd(g):
        p = e / se
        return (np.expand_dims(g, axis) * (p - y),)
    return _record("cross_entropy_with_targets", out, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
    """Accumulate gradients of `loss` into every requires_grad tensor on its tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {}
    holders: dict[int, Tensor] = {}
    grads[id(loss)] = (np.ones_like(loss.data) if seed_grad is None
                       else np.asarray(seed_grad, dtype=loss.dtype).reshape(loss.data.shape))
    holders[id(loss)] = loss
    for output, entry in reversed(tape.entries):
        g_out = grads.get(id(output))
        if g_out is None:
            continue
        parent_grads = entry.backward(g_out)
        for parent, g in zip(entry.inputs, parent_grads):
            if parent is None or g is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + g
            else:
                grads[pid] = g
                holders[pid] = parent
    for pid, tensor in holders.items():
        if tensor.requires_grad:
            g = grads[pid]
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# flat binary serialization
#
# layout: little-endian u64 rank, u64 per dimension, then the raw float data.
# The element width is not stored; multi-tensor files carry dtype in their
# manifest, and single-tensor files can infer it from the byte count.

def write_tensor(fh, array: np.ndarray) -> None:
    # note: not ascontiguousarray, which would promote rank-0 to rank-1
    arr = np.asarray(array, order="C")
    if arr.dtype not in _ALLOWED_DTYPES:
        raise ContractError(f"write_tensor: unsupported dtype {arr.dtype}")
    fh.write(struct.pack("<Q", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh, dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    (rank,) = struct.unpack("<Q", fh.read(8))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ContractError("read_tensor: truncated tensor record")
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
    return arr.reshape(dims)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    """Load a single-tensor file; element width is inferred from the size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    (rank,) = struct.unpack_from("<Q", blob, 0)
    dims = struct.unpack_from(f"<{rank}Q", blob, 8) if rank else ()
    header = 8 * (1 + rank)
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = len(blob) - header
    if count > 0 and payload == 8 * count:
        dtype = np.dtype("<f8")
    elif count > 0 and payload == 4 * count:
        dtype = np.dtype("<f4")
    else:
        raise ContractError("load_tensor: byte count matches neither f32 nor f64")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=header).astype(dtype.newbyteorder("="), copy=True)
    return arr.reshape(dims)
