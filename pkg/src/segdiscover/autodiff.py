"""Reverse-mode automatic differentiation on dense float64 matrices.

Everything is a 2-D array; vectors are columns. A forward pass records
parent links and a backward closure on every result, and ``backward``
replays that tape in reverse topological order, accumulating gradients
into leaf tensors created with ``requires_grad=True``. Tensors are
treated as immutable once created; an optimizer may mutate parameter
``.data`` only between passes, which keeps any recorded tape valid for
exactly one forward/backward round trip.

Supported operations: matmul, transpose, add (with column-vector bias
broadcast), elementwise multiply, scalar scaling, ReLU, column-wise
L2 normalization, column-wise softmax, clamped log, sum reduction and
row/column concatenation, plus a column gather used to slice batches.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"NOPS"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the node."""


class Tensor:
    """A float64 matrix with an optional gradient slot.

    ``name`` is carried into shape-error messages so a failure points at
    the offending node rather than at anonymous arrays.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensor {name or '<anon>'}: expected at most 2 dims, got {arr.ndim}")
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def label(self):
        return self.name if self.name is not None else f"<{self.data.shape[0]}x{self.data.shape[1]}>"

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def parameter(data, name):
    """A named leaf tensor with a gradient slot."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(a: Tensor, b: Tensor | None = None) -> bool:
    tracked = a.requires_grad or a._parents != () or a._backward is not None
    if b is not None:
        tracked = tracked or _tracked(b)
    return tracked


def _result(data, parents, backward):
    if any(_tracked(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul {a.label()} @ {b.label()}: inner dims {a.data.shape} vs {b.data.shape}"
        )
    out = a.data @ b.data

    def backward(grad, acc):
        acc(a, grad @ b.data.T)
        acc(b, a.data.T @ grad)

    return _result(out, (a, b), backward)


def transpose(a):
    a = _as_tensor(a)

    def backward(grad, acc):
        acc(a, grad.T)

    return _result(a.data.T, (a,), backward)


def add(a, b):
    """Elementwise sum; the second operand may be a column vector bias."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.data.shape != b.data.shape
    if bias and not (b.data.shape == (a.data.shape[0], 1)):
        raise ShapeError(f"add {a.label()} + {b.label()}: shapes {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward(grad, acc):
        acc(a, grad)
        acc(b, grad.sum(axis=1, keepdims=True) if bias else grad)

    return _result(out, (a, b), backward)


def mul(a, b):
    """Elementwise product; either operand may be a python scalar."""
    if not isinstance(a, Tensor) and np.isscalar(a):
        a, b = b, a
    a = _as_tensor(a)
    if np.isscalar(b):
        s = float(b)

        def backward_scalar(grad, acc):
            acc(a, grad * s)

        return _result(a.data * s, (a,), backward_scalar)
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul {a.label()} * {b.label()}: shapes {a.data.shape} vs {b.data.shape}")

    def backward(grad, acc):
        acc(a, grad * b.data)
        acc(b, grad * a.data)

    return _result(a.data * b.data, (a, b), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0

    def backward(grad, acc):
        acc(a, grad * mask)

    return _result(a.data * mask, (a,), backward)


def log(a, floor=0.0):
    """Natural log; with ``floor`` > 0 the argument is clamped below first."""
    a = _as_tensor(a)
    clamped = np.maximum(a.data, floor) if floor > 0.0 else a.data
    if floor <= 0.0 and np.any(a.data <= 0.0):
        raise ValueError("log of non-positive entries without a floor")
    out = np.log(clamped)
    active = a.data >= floor if floor > 0.0 else np.ones_like(a.data, dtype=bool)

    def backward(grad, acc):
        acc(a, grad * active / clamped)

    return _result(out, (a,), backward)


def softmax_cols(a):
    """Column-wise softmax, max-subtracted for stability."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)

    def backward(grad, acc):
        dot = (grad * s).sum(axis=0, keepdims=True)
        acc(a, s * (grad - dot))

    return _result(s, (a,), backward)


def l2_normalize_cols(a, eps=1e-12):
    """Scale every column to unit L2 norm."""
    a = _as_tensor(a)
    norms = np.maximum(np.sqrt((a.data ** 2).sum(axis=0, keepdims=True)), eps)
    y = a.data / norms

    def backward(grad, acc):
        dot = (grad * y).sum(axis=0, keepdims=True)
        acc(a, (grad - y * dot) / norms)

    return _result(y, (a,), backward)


def sum_all(a):
    a = _as_tensor(a)

    def backward(grad, acc):
        acc(a, np.full_like(a.data, float(grad[0, 0])))

    return _result(np.array([[a.data.sum()]]), (a,), backward)


def mean_all(a):
    a = _as_tensor(a)
    return mul(sum_all(a), 1.0 / a.data.size)


def concat_cols(tensors: Sequence):
    tensors = [_as_tensor(t) for t in tensors]
    rows = {t.data.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[t.label() for t in tensors]}")
    widths = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(grad, acc):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            acc(t, grad[:, lo:hi])

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def concat_rows(tensors: Sequence):
    tensors = [_as_tensor(t) for t in tensors]
    cols = {t.data.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ: {[t.label() for t in tensors]}")
    heights = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + heights)

    def backward(grad, acc):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            acc(t, grad[lo:hi, :])

    return _result(np.concatenate([t.data for t in tensors], axis=0), tensors, backward)


def gather_cols(a, indices):
    """Select columns by index; backward scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(grad, acc):
        g = np.zeros_like(a.data)
        np.add.at(g, (slice(None), idx), grad)
        acc(a, g)

    return _result(a.data[:, idx], (a,), backward)


def backward(output: Tensor):
    """Accumulate d(output)/d(leaf) into every reachable gradient slot.

    ``output`` must be scalar (a 1x1 tensor). Gradient slots are added
    to, not reset; call ``zero_grad`` on parameters between passes.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.data.shape}")

    order = []
    seen = set()
    stack = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(output): np.ones_like(output.data)}

    def acc(node, g):
        if not _tracked(node):
            return
        key = id(node)
        if key in grads:
            grads[key] += g
        else:
            grads[key] = g.copy() if isinstance(g, np.ndarray) else np.array(g)

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._backward is not None:
            node._backward(g, acc)


def save_checkpoint(path, params: Mapping[str, "Tensor | np.ndarray"]):
    """Write named parameters in the versioned binary checkpoint format.

    Layout: magic ``NOPS``, format u32, then per parameter (sorted by
    name): u32 name length, name bytes, u32 ndim, u32 dims, little-endian
    f64 values in row-major order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            arr = params[name]
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(blob[pos:pos + nlen]) != nlen:
                raise struct.error("truncated name")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            if len(blob) - pos < 8 * count:
                raise struct.error("truncated values")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
        except struct.error as exc:
            raise ValueError(f"{path}: truncated checkpoint ({exc})") from exc
        out[name] = arr.reshape(dims).astype(np.float64)
    return out


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()
