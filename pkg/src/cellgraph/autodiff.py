"""Small reverse-mode autodiff over dense float64 arrays.

Operations are recorded on the :class:`Tape` that is active in the current
thread (``with Tape() as tape: ...``). Outside a tape every primitive is a plain
numpy evaluation, which is what inference uses.

Shapes must match exactly; the only broadcasting is multiplication by a Python
scalar. Row/column broadcasting is spelled out as a matmul with a ones vector.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NonScalarLoss, ShapeMismatch

_local = threading.local()


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def constant(value):
    return Tensor(value, requires_grad=False)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered log of primitive applications; usable as a context manager."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(op, inputs, value, backward):
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.records.append(Record(op, inputs, out, backward))
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# primitives

def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    _check_same("add", a, b)
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b):
    _check_same("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a, b):
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def divide(a, b):
    _check_same("divide", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit("divide", (a, b), out, lambda g: (g / bv, -g * out / bv))


def scale(a, c):
    c = float(c)
    return _emit("scale", (a,), a.value * c, lambda g: (g * c,))


def concat(tensors):
    """Concatenate along the last axis."""
    tensors = tuple(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeMismatch(f"concat: leading shapes {[t.shape for t in tensors]} differ")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat", tensors, np.concatenate([t.value for t in tensors], axis=-1), backward)


def take(a, key):
    """Basic (slice/integer) indexing."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] += g
        return (out,)

    return _emit("slice", (a,), a.value[key].copy(), backward)


def transpose(a):
    if a.value.ndim != 2:
        raise ShapeMismatch("transpose expects a matrix")
    return _emit("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def relu(a):
    mask = a.value > 0
    return _emit("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softmax_rows(a):
    v = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax", (a,), out, backward)


def row_sum(a):
    """``n x m -> n x 1``."""
    m = a.shape[1]
    return _emit("row_sum", (a,), a.value.sum(axis=1, keepdims=True),
                 lambda g: (np.repeat(g, m, axis=1),))


def row_mean(a):
    """``n x m -> n x 1``."""
    m = a.shape[1]
    return _emit("row_mean", (a,), a.value.mean(axis=1, keepdims=True),
                 lambda g: (np.repeat(g / m, m, axis=1),))


def mean_all(a):
    size = a.value.size
    shape = a.shape
    return _emit("mean_all", (a,), np.array(a.value.mean()),
                 lambda g: (np.full(shape, float(g) / size),))


def sum_all(a):
    shape = a.shape
    return _emit("sum_all", (a,), np.array(a.value.sum()), lambda g: (np.full(shape, float(g)),))


def absolute(a):
    sign = np.sign(a.value)
    return _emit("abs", (a,), np.abs(a.value), lambda g: (g * sign,))


def sqrt(a):
    out = np.sqrt(a.value)
    return _emit("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def huber(a, delta=1.0):
    """Elementwise smooth-L1: ``0.5 r^2/delta`` inside ``|r| < delta``, else ``|r| - 0.5 delta``."""
    r = a.value
    inside = np.abs(r) < delta
    out = np.where(inside, 0.5 * r * r / delta, np.abs(r) - 0.5 * delta)
    return _emit("huber", (a,), out, lambda g: (g * np.where(inside, r / delta, np.sign(r)),))


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss, tape, wrt=()):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring tensor on ``tape``.

    Tensors in ``wrt`` that the loss does not reach get a zero gradient.
    """
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    seen = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        parts = rec.backward(g)
        for t, gt in zip(rec.inputs, parts):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = np.asarray(gt, dtype=np.float64).reshape(t.shape)
                seen[key] = t
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in seen:
                seen[id(t)] = t
    for t in wrt:
        seen.setdefault(id(t), t)
    for key, t in seen.items():
        g = grads.get(key)
        t.grad = np.zeros(t.shape) if g is None else g


def grad_check(f, x, h=1e-5):
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    ``f`` maps a Tensor to a scalar Tensor; ``numeric`` is a central difference.
    """
    x = Tensor(np.array(x.value if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    backward(y, tape, wrt=(x,))
    analytic = x.grad.reshape(-1)
    base = x.value.copy()
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        down = f(Tensor(base.copy())).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# checkpoint file

CKPT_MAGIC = b"CGCK"
CKPT_VERSION = 1


def save_checkpoint(path, tensors, meta=None):
    """Write named arrays (row-major float64) plus a JSON header to ``path``."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        value = tensors[name].value if isinstance(tensors[name], Tensor) else tensors[name]
        # np.array rather than ascontiguousarray, which would promote 0-d to 1-d
        arr = np.array(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    """Return ``(arrays, meta)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file", path)
    try:
        version, meta_len = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", path)
        pos = 10
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", data, pos)
            pos += 3
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}", path) from None
    if pos != len(data):
        raise FormatError("trailing bytes after last tensor", path)
    return arrays, meta
