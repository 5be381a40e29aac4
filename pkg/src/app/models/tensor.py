# File: src/app/models/tensor.py
"""
Reverse-mode differentiation for the handful of array operations the
tokenizer needs.

Ops record themselves on the active Tape only when a Tape is open and at least
one input requires a gradient; outside a Tape everything runs as plain numpy.
Nodes are appended in creation order, which is already a topological order,
so Tape.backward walks the list once in reverse.
"""
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from src.app.core.config import settings
from src.app.utils.exceptions import NonFiniteException, ValidationException

_state = threading.local()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "meta", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.meta: Dict[str, object] = {}
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = np.array(g, dtype=np.float64) if self.grad is None else self.grad + g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Tape:
    """
    Records differentiable ops for one training step. A tape belongs to the
    thread that opened it.
    """

    def __init__(self, debug: Optional[bool] = None):
        self.nodes: List[Tensor] = []
        self.debug = settings.DEBUG if debug is None else debug

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    @staticmethod
    def current() -> Optional["Tape"]:
        stack = getattr(_state, "tapes", None)
        return stack[-1] if stack else None

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        out._backward = backward
        self.nodes.append(out)

    def backward(self, root: Tensor) -> None:
        if root.values.size != 1:
            raise ValidationException("backward() needs a scalar root.")
        root.grad = np.ones_like(root.values)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _result(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    tape = Tape.current()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs_grad)
    if needs_grad:
        tape.record(out, backward)
    if tape is not None and tape.debug and not np.all(np.isfinite(out.values)):
        raise NonFiniteException(f"Non-finite values produced by {op}", {"op": op})
    return out


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationException(message)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x W^T + b for x of shape (T, D_in), W (D_out, D_in), b (D_out,)."""
    _require(x.values.ndim == 2, f"affine expects 2-D input, got shape {x.shape}")
    _require(
        W.values.ndim == 2 and W.shape[1] == x.shape[1],
        f"affine weight shape {W.shape} incompatible with input {x.shape}",
    )
    _require(b.shape == (W.shape[0],), f"affine bias shape {b.shape} != ({W.shape[0]},)")

    def backward(g):
        x.accumulate(g @ W.values)
        W.accumulate(g.T @ x.values)
        b.accumulate(g.sum(axis=0))

    return _result(x.values @ W.values.T + b.values, (x, W, b), backward, "affine")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward(g):
        x.accumulate(g * mask)

    return _result(np.where(mask, x.values, 0.0), (x,), backward, "relu")


def pool_padding(n_frames: int, factor: int) -> int:
    return (-n_frames) % factor


def avg_pool_time(x: Tensor, factor: int) -> Tensor:
    """
    Average non-overlapping groups of `factor` frames along axis 0.

    When the length is not divisible the last frame is repeated on the right;
    the pad count is kept in out.meta["padded_frames"].
    """
    _require(factor >= 1, "pool factor must be at least 1")
    _require(x.values.ndim == 2 and x.shape[0] >= 1, f"avg_pool_time expects (T, D), got {x.shape}")
    n_frames, dim = x.shape
    pad = pool_padding(n_frames, factor)
    padded = np.concatenate([x.values, np.repeat(x.values[-1:], pad, axis=0)]) if pad else x.values
    pooled = padded.reshape(-1, factor, dim).mean(axis=1)

    def backward(g):
        spread = np.repeat(g / factor, factor, axis=0)
        gx = spread[:n_frames].copy()
        if pad:
            gx[-1] += spread[n_frames:].sum(axis=0)
        x.accumulate(gx)

    out = _result(pooled, (x,), backward, "avg_pool_time")
    out.meta["padded_frames"] = pad
    return out


def softmax_xent(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy over rows of (T, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    _require(logits.values.ndim == 2, f"softmax_xent expects (T, C) logits, got {logits.shape}")
    _require(labels.shape == (logits.shape[0],), "softmax_xent needs one label per row")
    _require(
        labels.size == 0 or (labels.min() >= 0 and labels.max() < logits.shape[1]),
        "labels out of range for the number of classes",
    )

    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(labels.shape[0])
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        logits.accumulate(g * grad / labels.shape[0])

    return _result(np.asarray(loss), (logits,), backward, "softmax_xent")


def mean_over_branches(xs: Sequence[Tensor]) -> Tensor:
    _require(len(xs) >= 1, "mean_over_branches needs at least one tensor")
    shape = xs[0].shape
    _require(all(x.shape == shape for x in xs), "mean_over_branches needs equal shapes")
    n = len(xs)

    def backward(g):
        for x in xs:
            x.accumulate(g / n)

    return _result(np.mean([x.values for x in xs], axis=0), tuple(xs), backward, "mean_over_branches")


def mse(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.values - b.values
    count = max(diff.size, 1)

    def backward(g):
        a.accumulate(g * 2.0 * diff / count)
        b.accumulate(-g * 2.0 * diff / count)

    return _result(np.asarray(np.mean(diff**2)), (a, b), backward, "mse")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.values.copy(), requires_grad=False)


def sign_ste(x: Tensor, clip: bool = False) -> Tensor:
    """
    Forward sign(x) with sign(0) = +1; backward passes the gradient through
    unchanged (or zeroed where |x| > 1 when clip is set).
    """
    out_values = np.where(x.values >= 0, 1.0, -1.0)
    mask = np.abs(x.values) <= 1.0 if clip else None

    def backward(g):
        x.accumulate(g if mask is None else g * mask)

    return _result(out_values, (x,), backward, "sign_ste")


def identity(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate(g)

    return _result(x.values.copy(), (x,), backward, "identity")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _result(a.values + b.values, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"sub shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        a.accumulate(g)
        b.accumulate(-g)

    return _result(a.values - b.values, (a, b), backward, "sub")


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x.accumulate(g * c)

    return _result(x.values * c, (x,), backward, "scale")


def sum_squares(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate(g * 2.0 * x.values)

    return _result(np.asarray(np.sum(x.values**2)), (x,), backward, "sum_squares")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.values.size if axis is None else x.shape[axis]

    def backward(g):
        g = g if axis is None else np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g / count, x.shape))

    return _result(np.asarray(x.values.mean(axis=axis)), (x,), backward, "mean")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    _require(len(xs) >= 1, "concat needs at least one tensor")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            x.accumulate(part)

    return _result(np.concatenate([x.values for x in xs], axis=axis), tuple(xs), backward, "concat")


def sigmoid(x: Tensor, temperature: float = 1.0) -> Tensor:
    """sigmoid(temperature * x)."""
    y = 0.5 * (1.0 + np.tanh(0.5 * temperature * x.values))

    def backward(g):
        x.accumulate(g * temperature * y * (1.0 - y))

    return _result(y, (x,), backward, "sigmoid")


ENTROPY_EPS = 1e-12


def binary_entropy(q: Tensor) -> Tensor:
    """Elementwise H(q) = -q ln q - (1-q) ln(1-q), in nats."""
    qc = np.clip(q.values, ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    h = -(qc * np.log(qc) + (1.0 - qc) * np.log(1.0 - qc))

    def backward(g):
        q.accumulate(g * (np.log(1.0 - qc) - np.log(qc)))

    return _result(h, (q,), backward, "binary_entropy")


class GradCheckResult(BaseModel):
    max_rel_error: float
    worst_param: Optional[str] = None
    worst_index: Optional[Tuple[int, ...]] = None
    mismatches: List[Dict[str, object]] = []


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-4,
    threshold: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheckResult:
    """
    Compare tape gradients with central differences, coordinate by coordinate.

    Relative error is |a - n| / max(|a|, |n|, floor). Every coordinate above
    `threshold` is reported with its parameter name and index.
    """
    for p in params.values():
        _require(p.values.dtype == np.float64, "grad_check requires float64 parameters")
        p.zero_grad()

    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.values)) for name, p in params.items()}

    result = GradCheckResult(max_rel_error=0.0)
    for name, p in params.items():
        for index in np.ndindex(p.shape):
            original = p.values[index]
            p.values[index] = original + eps
            up = loss_fn().item()
            p.values[index] = original - eps
            down = loss_fn().item()
            p.values[index] = original

            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name][index])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > threshold:
                result.mismatches.append(
                    {"param": name, "index": tuple(int(i) for i in index), "analytic": a, "numeric": numeric}
                )
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst_param = name
                result.worst_index = tuple(int(i) for i in index)

    for p in params.values():
        p.zero_grad()
    return result
