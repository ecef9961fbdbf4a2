"""Reverse-mode autodiff over dense float64 arrays.

Small tape-based engine backing the two networks. The tape is implicit in the
parent links of each Tensor and is rebuilt on every forward pass; everything
is numpy float64, no broadcasting beyond what the networks use. Also houses
the decoupled-weight-decay optimizer, the central-difference gradient checker
and the binary checkpoint codec.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError, TrainingDivergence

Array = np.ndarray

CHECKPOINT_MAGIC = b"CPK1"
CHECKPOINT_VERSION = 1


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    """A float64 array plus gradient bookkeeping.

    Immutable by convention once created, except `grad`, which accumulates
    across backward() calls until reset with zero_grad().
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Iterable[tuple["Tensor", Array]]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item: tensor has shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad of every requires_grad node."""
        if self.data.size != 1:
            raise ContractViolation(
                f"backward: loss must be scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ContractViolation("backward: loss does not require grad (empty tape)")
        topo = _toposort(self)
        pending: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative postorder; forward graphs get deep with many layers.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: Array, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "add")
    data = a.data + b.data

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _result(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _result(data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _result(data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g):
        return [(a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))]

    return _result(data, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return [(a, -g)]

    return _result(-a.data, "neg", (a,), backward)


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth everywhere, the only nonlinearity used."""
    a = _wrap(a)
    with np.errstate(over="ignore"):  # exp overflow saturates sigmoid to 0
        sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        return [(a, g * sig * (1.0 + a.data * (1.0 - sig)))]

    return _result(data, "silu", (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g):
        return [(a, g / a.data)]

    return _result(data, "log", (a,), backward)


# -- linear algebra / structure ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    data = a.data @ b.data

    def backward(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _result(data, "matmul", (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    if not parts:
        raise ContractViolation("concat: empty input list")
    ndim = parts[0].ndim
    ax = axis if axis >= 0 else ndim + axis
    for p in parts:
        if p.ndim != ndim:
            raise ContractViolation(
                f"concat: rank mismatch {[q.shape for q in parts]}")
        for d in range(ndim):
            if d != ax and p.shape[d] != parts[0].shape[d]:
                raise ContractViolation(
                    f"concat: shapes {[q.shape for q in parts]} differ off axis {ax}")
    data = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]

    def backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
        return list(zip(parts, pieces))

    return _result(data, "concat", parts, backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows a[indices]; indices is a 1-D integer array."""
    a = _wrap(a)
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractViolation(f"gather_rows: indices must be 1-D integers, got {idx.dtype}")
    if a.ndim < 1:
        raise ContractViolation("gather_rows: operand must have rows")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractViolation(
            f"gather_rows: index out of range for {a.shape[0]} rows")
    data = a.data[idx]

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return [(a, acc)]

    return _result(data, "gather_rows", (a,), backward)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of `a` into `num_segments` buckets given by segment_ids."""
    a = _wrap(a)
    seg = np.asarray(segment_ids)
    if seg.ndim != 1 or seg.shape[0] != a.shape[0]:
        raise ContractViolation(
            f"segment_sum: ids shape {seg.shape} vs operand rows {a.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ContractViolation(
            f"segment_sum: segment id out of range [0, {num_segments})")
    data = np.zeros((num_segments,) + a.shape[1:], dtype=np.float64)
    np.add.at(data, seg, a.data)

    def backward(g):
        return [(a, g[seg])]

    return _result(data, "segment_sum", (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return [(a, s * (g - inner))]

    return _result(s, "softmax", (a,), backward)


def l2_norm(a, eps: float = 1e-12) -> Tensor:
    """Euclidean norm along the last axis, keepdims; eps keeps it smooth at 0."""
    a = _wrap(a)
    sq = np.sum(a.data * a.data, axis=-1, keepdims=True)
    norm = np.sqrt(sq + eps)

    def backward(g):
        return [(a, g * a.data / norm)]

    return _result(norm, "l2_norm", (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape).copy())]

    return _result(data, "sum", (a,), backward)


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    if n == 0:
        raise ContractViolation("mean: empty tensor")
    data = a.data.mean()

    def backward(g):
        return [(a, np.full(a.shape, float(g) / n))]

    return _result(data, "mean", (a,), backward)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW with decoupled weight decay; moments keyed by parameter name."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, Array] = field(default_factory=dict)
    second_moment: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ContractViolation("OptimizerState: lr must be > 0 and betas in (0, 1)")
        if self.weight_decay < 0:
            raise ContractViolation("OptimizerState: weight_decay must be >= 0")
        if self.step_count < 0:
            raise ContractViolation("OptimizerState: step_count must be >= 0")


def adamw_step(state: OptimizerState, params: dict[str, Tensor],
               grads: dict[str, Array] | None = None) -> dict[str, Tensor]:
    """One optimizer step over named params, in place.

    grads defaults to each param's accumulated .grad. The weight-decay term is
    decoupled: it never passes through the moment estimates.
    """
    t = state.step_count + 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"adamw_step: grad shape {g.shape} vs param {p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"adamw_step: non-finite gradient for '{name}'")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.first_moment[name] = m
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps) \
            - lr * state.weight_decay * p.data
    state.step_count = t
    return params


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


# -- gradient checking --------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: dict[str, Tensor],
                            epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    f is a deterministic closure over `params` returning a scalar Tensor.
    Relative error per entry is |a - n| / (|a| + |n| + 1e-12); non-finite
    differences surface as inf rather than raising.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ContractViolation(f"finite_difference_check: epsilon {epsilon} outside [1e-7, 1e-3]")
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            hi = f().item()
            flat[i] = keep - epsilon
            lo = f().item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * epsilon)
            if not np.isfinite(numeric):
                return float("inf")
            rel = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst


# -- checkpoint codec ---------------------------------------------------------

def _coerce_arrays(tensors: dict) -> dict[str, Array]:
    out = {}
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        out[name] = np.asarray(arr, dtype=np.float64)
    return out


def checkpoint_bytes(tensors: dict) -> bytes:
    """Serialize named arrays; deterministic (records sorted by name)."""
    arrays = _coerce_arrays(tensors)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    for name in sorted(arrays):
        arr = arrays[name]
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(tensors))


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise ContractViolation(f"checkpoint: truncated while reading {what}")
    return blob


def load_checkpoint(path) -> dict[str, Array]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<B", _read_exact(fh, 1, "version"))
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"checkpoint: unsupported version {version}")
        out: dict[str, Array] = {}
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise ContractViolation("checkpoint: truncated record header")
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims")) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 8 * count, f"payload of '{name}'")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            out[name] = arr
        return out
