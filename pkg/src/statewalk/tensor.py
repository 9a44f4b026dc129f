"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The graph is a Tape: every primitive executed while a tape is active appends
one node holding the output tensor, the input tensors, and a backward closure.
Walking the nodes in reverse execution order is a valid topological order by
construction, so each node is visited exactly once and gradients accumulate
additively at fan-out points.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operands are not conformable for an operation."""

    def __init__(self, op: str, *shapes):
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: non-conformable shapes {rendered}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""

    def __init__(self, what: str):
        super().__init__(f"non-finite values produced by {what}")
        self.what = what


class Tensor:
    """A dense float64 array plus a gradient slot of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.data.shape)
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"


class Parameter(Tensor):
    """Trainable tensor carrying an accumulated gradient and Adam moments."""

    __slots__ = ("m", "v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(data, name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


_ACTIVE_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tape:
    """Execution-ordered record of primitives.

    Use as a context manager around the forward pass; call ``backward`` on a
    scalar loss afterwards. Outside any active tape the primitives compute
    values without recording, which is the inference path.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError("backward: loss must be scalar", loss.data.shape)
        _accumulate(loss, np.ones_like(loss.data))
        for out, _inputs, backward_fn in reversed(self.nodes):
            if out.grad is None:
                continue  # dead branch: nothing downstream consumed it
            backward_fn(out.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def custom_op(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Register a primitive: check finiteness, wrap, and record on the tape.

    ``backward`` receives the output gradient and must accumulate into the
    inputs via their ``grad`` slots (use ``accumulate_grad``).
    """
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    out = Tensor(value)
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


# Public alias so sibling modules can define primitives without reaching into
# underscored names.
accumulate_grad = _accumulate


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, inverting numpy broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcastable(a: np.ndarray, b: np.ndarray) -> bool:
    try:
        np.broadcast_shapes(a.shape, b.shape)
        return True
    except ValueError:
        return False


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return custom_op("matmul", a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.data, b.data):
        raise ShapeError("add", a.data.shape, b.data.shape)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return custom_op("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.data, b.data):
        raise ShapeError("sub", a.data.shape, b.data.shape)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return custom_op("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.data, b.data):
        raise ShapeError("mul", a.data.shape, b.data.shape)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return custom_op("mul", a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return custom_op("neg", -a.data, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient flows to the constant)."""
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return custom_op("scale", a.data * c, (a,), backward)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_values(a.data)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return custom_op("sigmoid", y, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - y * y))

    return custom_op("tanh", y, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return custom_op("exp", y, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive input")
    y = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return custom_op("log", y, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability.

    Rows containing -inf are allowed on input (zero probability entries);
    every other non-finite value is rejected.
    """
    x = a.data
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        _accumulate(a, (g - inner) * y)

    return custom_op("softmax", y, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse

    def backward(g):
        total = np.sum(g, axis=-1, keepdims=True)
        _accumulate(a, g - np.exp(y) * total)

    return custom_op("log_softmax", y, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    datas = [t.data for t in tensors]
    try:
        value = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[d.shape for d in datas]) from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return custom_op("concat", value, tuple(tensors), backward)


def lookup(table: Tensor, indices) -> Tensor:
    """Gather rows ``table[indices]``; gradient scatters back additively."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("lookup: table must be 2-D", table.data.shape)
    if idx.ndim != 1:
        raise ShapeError("lookup: indices must be 1-D", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"lookup: index out of range [0, {table.data.shape[0]}): "
            f"{int(idx.min())}..{int(idx.max())}"
        )

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accumulate(table, gt)

    return custom_op("lookup", table.data[idx], (table,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.data.shape)

    def backward(g):
        _accumulate(a, g.T)

    return custom_op("transpose", a.data.T, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return custom_op("sum_all", a.data.sum(), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def adam_step(params: Sequence[Parameter], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update with bias correction; zeroes gradients afterwards."""
    b1, b2 = betas
    for p in params:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"gradient of parameter {p.name!r}")
    for p in params:
        p.step_count += 1
        p.m = b1 * p.m + (1.0 - b1) * p.grad
        p.v = b2 * p.v + (1.0 - b2) * p.grad * p.grad
        m_hat = p.m / (1.0 - b1 ** p.step_count)
        v_hat = p.v / (1.0 - b2 ** p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


CHECKPOINT_MAGIC = b"STWK0001"


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays: magic, manifest length, JSON manifest, raw payload.

    Layout: 8-byte magic ``STWK0001``, little-endian uint64 manifest byte
    length, UTF-8 JSON ``{"tensors": [{"name", "shape", "offset"}, ...]}``,
    then the concatenated row-major little-endian float64 payloads. Offsets
    are byte positions into the payload region.
    """
    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        shape = list(np.shape(arr))   # before ascontiguousarray promotes 0-d
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": shape, "offset": len(payload)})
        payload += a.tobytes()
    manifest = json.dumps({"tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        f.write(bytes(payload))


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    (manifest_len,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + manifest_len].decode("utf-8"))
    payload = blob[16 + manifest_len:]
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = flat.reshape(shape).astype(np.float64)
    return out
