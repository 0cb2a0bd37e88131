"""
Dense double-precision tensors with a recorded tape and reverse-mode gradients.

Usage:

    with Tape():
        loss = cross_entropy(matmul(x, w), targets)
    backward(loss)
    w.grad  # dloss/dw

Operations record onto the active tape only when some input requires
gradients; outside a tape they just compute values. The tape is held in a
context variable, so each thread (or task) records its own tape.

There is no general broadcasting. The only implicit expansion is adding a
bias row (shape (m,) or (1, m)) to an (n, m) matrix.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from sg_commonsense.errors import ContractError

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


# -----------------------------
# Tensor and tape
# -----------------------------

class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_tape")

    def __init__(self, values, *, requires_grad: bool = False, name: str = ""):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None


def _emit(values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad)
    tape = _ACTIVE_TAPE.get()
    if needs_grad and tape is not None:
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
        out._tape = tape
    return out


def _require_2d(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.values.ndim != 2:
            raise ContractError(f"{name} expects 2-D tensors, got shape {t.shape}")


# -----------------------------
# Primitives
# -----------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum, or bias-row addition when b is (m,) / (1, m) and a is (n, m)."""
    if a.shape == b.shape:
        return _emit(a.values + b.values, (a, b), lambda g: (g, g))

    bias_row = a.values.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1]))
    if not bias_row:
        raise ContractError(f"add shape mismatch: {a.shape} + {b.shape}")
    b_shape = b.shape

    def back(g):
        return g, g.sum(axis=0).reshape(b_shape)

    return _emit(a.values + b.values.reshape(1, -1), (a, b), back)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"mul_elementwise shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(a.values * factor, (a,), lambda g: (g * factor,))


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    return _emit(a.values.T.copy(), (a,), lambda g: (g.T,))


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_columns needs at least one tensor")
    _require_2d("concat_columns", *parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ContractError(f"concat_columns row mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.values for p in parts], axis=1), parts, back)


def row_softmax(a: Tensor) -> Tensor:
    _require_2d("row_softmax", a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, (a,), back)


def relu(a: Tensor) -> Tensor:
    keep = a.values > 0
    return _emit(np.where(keep, a.values, 0.0), (a,), lambda g: (g * keep,))


def mask_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Entries where mask == 0 are replaced by value; gradient flows only through kept entries."""
    mask = np.asarray(mask)
    if mask.shape != a.shape:
        raise ContractError(f"mask_fill shape mismatch: {a.shape} vs mask {mask.shape}")
    keep = mask != 0
    return _emit(np.where(keep, a.values, float(value)), (a,), lambda g: (g * keep,))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_rows", a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _emit(a.values[start:stop].copy(), (a,), back)


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_columns", a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.values[:, start:stop].copy(), (a,), back)


def gather_rows(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    _require_2d("gather_rows", a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"gather_rows index out of range for shape {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.values[idx], (a,), back)


def pairwise_sum(p: Tensor, q: Tensor) -> Tensor:
    """Row i*n + j of the (n*n, h) result is p[i] + q[j]."""
    _require_2d("pairwise_sum", p, q)
    if p.shape != q.shape:
        raise ContractError(f"pairwise_sum shape mismatch: {p.shape} vs {q.shape}")
    n, h = p.shape
    out = (p.values[:, None, :] + q.values[None, :, :]).reshape(n * n, h)

    def back(g):
        g3 = g.reshape(n, n, h)
        return g3.sum(axis=1), g3.sum(axis=0)

    return _emit(out, (p, q), back)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g), dtype=DTYPE),))


def log_softmax_rows(values: np.ndarray) -> np.ndarray:
    z = values - values.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    _require_2d("cross_entropy", logits)
    t = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise ContractError(f"cross_entropy expects {n} targets, got shape {t.shape}")
    if n == 0:
        raise ContractError("cross_entropy over zero rows")
    if t.min() < 0 or t.max() >= c:
        raise ContractError(f"cross_entropy target out of range for {c} classes: {t.tolist()}")
    logp = log_softmax_rows(logits.values)
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        return (grad * (float(g) / n),)

    return _emit(np.asarray(loss), (logits,), back)


# -----------------------------
# Reverse pass
# -----------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad of every leaf tensor on loss's tape that requires gradients."""
    if loss.values.shape not in ((), (1,), (1, 1)):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape (no parameter reaches it)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    produced = {id(r.output) for r in tape.records}
    leaves: dict[int, Tensor] = {}

    for record in reversed(tape.records):
        g_out = grads.pop(id(record.output), None)
        if g_out is None:
            continue
        for inp, g_in in zip(record.inputs, record.backward_fn(g_out)):
            if g_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + g_in if key in grads else np.array(g_in, dtype=DTYPE)
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        leaf.grad = grads[key].reshape(leaf.shape)


# -----------------------------
# Gradient checking
# -----------------------------

def numeric_gradient(fn: Callable[[], float], tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of fn() with respect to tensor.values (perturbed in place)."""
    grad = np.zeros(tensor.shape, dtype=DTYPE)
    values = tensor.values
    for idx in np.ndindex(*tensor.shape):
        orig = values[idx]
        values[idx] = orig + eps
        up = fn()
        values[idx] = orig - eps
        down = fn()
        values[idx] = orig
        grad[idx] = (up - down) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a|| + ||n||, floor)."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(num / den)


# -----------------------------
# Adam
# -----------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to params[name].values."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step

    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step shape mismatch for {name!r}: param {p.shape} vs grad {g.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)

        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)

    return state
