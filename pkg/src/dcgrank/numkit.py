"""Dense float64 kernel: forward ops with analytic backward passes.

Tensors are plain 2-D ``numpy.float64`` arrays; vectors are ``1 x n`` rows.
Weights are stored ``(in, out)`` so every linear map reads ``x @ W``.

Checkpoint format (little-endian)::

    b"DCGCKPT1"
    uint32  header length, then that many bytes of UTF-8 JSON (metadata)
    uint32  record count
    per record, in flat-view (lexicographic name) order:
        uint16 name length, name bytes (UTF-8)
        uint32 rows, uint32 cols
        rows*cols float64 values, row-major
"""

from __future__ import annotations

import json
import struct
from collections.abc import Callable, Iterable, Mapping
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"DCGCKPT1"


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EvaluationError(RuntimeError):
    """A function under evaluation produced a non-finite value."""


def as_tensor2(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} x {b.shape}"
        )
    return a @ b


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Return ``(d_a, d_b)`` for ``out = a @ b``."""
    return grad @ b.T, a.T @ grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

UNARY_OPS = ("relu", "tanh", "sigmoid")
BINARY_OPS = ("add", "mul")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def elementwise(op: str, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    if op in UNARY_OPS:
        if op == "relu":
            return relu(x)
        if op == "tanh":
            return np.tanh(x)
        return sigmoid(x)
    if op in BINARY_OPS:
        if y is None or np.shape(x) != np.shape(y):
            raise DimensionError(
                f"{op} shape mismatch: {np.shape(x)} vs {np.shape(y)}"
            )
        return x + y if op == "add" else x * y
    raise ValueError(f"unknown elementwise op {op!r}")


def elementwise_backward(op, grad, x, y=None, out=None):
    """Local derivative of :func:`elementwise`.

    Unary ops return ``d_x``; binary ops return ``(d_x, d_y)``. ``out`` may be
    passed to reuse the forward result for tanh/sigmoid.
    """
    if op == "relu":
        return grad * (x > 0)
    if op == "tanh":
        t = np.tanh(x) if out is None else out
        return grad * (1.0 - t * t)
    if op == "sigmoid":
        s = sigmoid(x) if out is None else out
        return grad * s * (1.0 - s)
    if op == "add":
        return grad, grad
    if op == "mul":
        return grad * y, grad * x
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits: np.ndarray, target_index: int):
    """Cross-entropy of a ``1 x V`` logit row against one target.

    Returns ``(loss, d_logits)`` where ``d_logits = softmax - one_hot``.
    """
    logits = as_tensor2(logits, "logits")
    if logits.shape[0] != 1 or logits.shape[1] < 1:
        raise DimensionError(f"logits must be 1 x V, got {logits.shape}")
    V = logits.shape[1]
    if not 0 <= target_index < V:
        raise IndexError(f"target index {target_index} out of range for V={V}")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[0, target_index] -= 1.0
    return float(-logp[0, target_index]), grad


def softmax_xent_rows(logits: np.ndarray, targets: np.ndarray):
    """Row-wise version: ``logits`` is ``N x V``, ``targets`` length N.

    Returns per-row losses and the per-row gradient matrix.
    """
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    losses = -logp[rows, targets]
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return losses, grad


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameters with matching gradient buffers.

    The flat view concatenates tensors in lexicographic name order, each
    flattened row-major.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        arr = np.array(as_tensor2(value, name), dtype=np.float64, copy=True)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    @property
    def size(self) -> int:
        return sum(p.size for p in self._params.values())

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for n in self.names():
            size = self._params[n].size
            out[n] = slice(start, start + size)
            start += size
        return out

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([self._params[n].ravel() for n in self.names()])

    def flat_grad(self) -> np.ndarray:
        if not self._grads:
            return np.zeros(0)
        return np.concatenate([self._grads[n].ravel() for n in self.names()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise DimensionError(f"flat vector has {flat.size} entries, expected {self.size}")
        for n, sl in self.slices().items():
            self._params[n][...] = flat[sl].reshape(self._params[n].shape)

    def copy(self) -> "ParamStore":
        return ParamStore({n: p for n, p in self.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({n: np.zeros_like(p) for n, p in self.items()})

    def allclose(self, other: "ParamStore", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(np.allclose(self[n], other[n], rtol=0.0, atol=atol) for n in self.names())


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[ParamStore], float],
    params: ParamStore,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
    per_group: bool = False,
):
    """Compare analytic gradients against central finite differences.

    ``f(params)`` must return the scalar loss and accumulate its analytic
    gradient into ``params`` (the buffers are zeroed before each call).

    Returns the max relative error, or ``(max_error, {name: max_error})``
    when ``per_group`` is set.  ``coords`` restricts the check to a subset
    of flat indices.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")

    def evaluate() -> float:
        params.zero_grad()
        value = float(f(params))
        if not np.isfinite(value):
            raise EvaluationError(f"loss is not finite: {value}")
        return value

    evaluate()
    analytic = params.flat_grad().copy()
    base = params.flat().copy()
    idx = np.arange(base.size) if coords is None else np.asarray(list(coords), dtype=int)
    numeric = np.zeros(idx.size)
    work = base.copy()
    try:
        for k, i in enumerate(idx):
            work[i] = base[i] + eps
            params.set_flat(work)
            plus = evaluate()
            work[i] = base[i] - eps
            params.set_flat(work)
            minus = evaluate()
            work[i] = base[i]
            numeric[k] = (plus - minus) / (2.0 * eps)
    finally:
        params.set_flat(base)
        params.zero_grad()

    errors = _rel_error(analytic[idx], numeric)
    worst = float(errors.max()) if errors.size else 0.0
    if not per_group:
        return worst
    groups: dict[str, float] = {}
    slices = params.slices()
    for name, sl in slices.items():
        in_group = (idx >= sl.start) & (idx < sl.stop)
        if in_group.any():
            groups[name] = float(errors[in_group].max())
    return worst, groups


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def write_records(path, records: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    """Write named 2-D arrays in lexicographic name order (see module doc)."""
    head = json.dumps(dict(header or {}), sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(head)), head,
              struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = as_tensor2(records[name], name)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`write_records`; returns ``(header, records)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        arr = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").astype(np.float64)
        records[name] = arr.reshape(rows, cols)
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return header, records


def save_params(path, params: ParamStore, header: Mapping | None = None) -> None:
    write_records(path, dict(params.items()), header)


def load_params(path) -> tuple[dict, ParamStore]:
    header, records = read_records(path)
    return header, ParamStore(records)
