"""
This module contains the differentiable array core used by the model and the
alignment losses.

Values are float64 numpy arrays wrapped in :class:`Tensor`. Operations executed
while a :class:`ComputeTape` is active are recorded on it, and
:func:`backward` replays their adjoints in reverse order. Outside of a tape the
same functions simply compute values, which is what decoding and evaluation
use.
"""

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypedDict, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def _active_tape() -> Optional["ComputeTape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """
    An immutable float64 array that may take part in gradient computation.

    Attributes:
        data: The (read-only) values.
        requires_grad: Whether gradients flow into this tensor.
        grad: The accumulated gradient, populated by :func:`backward` for
            leaves that require gradients.
        name: Optional label used in error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[ComputeTape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: BackwardFn
    op: str


@dataclass
class ComputeTape:
    """
    Ordered record of the primitive operations executed while it is active.

    Use it as a context manager::

        with ComputeTape():
            loss = f(params)
            backward(loss)
    """

    entries: List[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "ComputeTape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(
        self, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str
    ) -> None:
        output._tape = self
        self.entries.append(TapeEntry(output, inputs, backward_fn, op))


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants as tensors that do not require gradients."""
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Create a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad, name=name)


def _result(
    data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str
) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn, op)
    return out


def _check_finite(data: np.ndarray, op: str) -> None:
    if np.isnan(data).any():
        raise NumericError(f"{op} received NaN input")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result(out, (a, b), backward_fn, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def gelu(a: ArrayLike) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    a = as_tensor(a)
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward_fn(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner),)

    return _result(out, (a,), backward_fn, "gelu")


# Shape manipulation


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def columns(a: ArrayLike, start: int, stop: int) -> Tensor:
    """Slice columns ``[start, stop)`` of a matrix."""
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"invalid column slice [{start}, {stop}) of {a.shape}")

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop], (a,), backward_fn, "columns")


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise DimensionError("concat_columns needs matrices with equal row counts")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, backward_fn, "concat")


def take_rows(table: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Select rows (or entries of a vector) by integer index; used for embeddings."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def backward_fn(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), backward_fn, "take_rows")


# Reductions


def sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), backward_fn, "sum")


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return sum(a, axis=axis) / float(count)


# Linear algebra and rows


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product of an m×k and a k×n matrix.

    Raises:
        DimensionError: If the operands are not matrices with agreeing inner
            dimensions.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


def softmax_rows(x: ArrayLike) -> Tensor:
    """
    Row-wise softmax computed with per-row max subtraction.

    Raises:
        NumericError: If the input contains NaN.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    _check_finite(x.data, "softmax_rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), backward_fn, "softmax_rows")


def l2_norm_rows(x: ArrayLike) -> Tensor:
    """Euclidean norm of every row of an m×d matrix, as a length-m vector."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_norm_rows expects a matrix, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))

    def backward_fn(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g / safe, 0.0)
        return (x.data * scale[:, None],)

    return _result(norms, (x,), backward_fn, "l2_norm_rows")


def layer_norm_rows(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm_rows: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    n = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * rstd

    def backward_fn(g):
        dxhat = g * gain.data
        dx = (rstd / n) * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward_fn, "layer_norm")


def cross_entropy_at_positions(
    logits: ArrayLike, targets: Sequence[int], positions: Sequence[int]
) -> Tensor:
    """
    Summed negative log-likelihood of ``targets`` at the given row positions.

    Args:
        logits: L×V matrix of unnormalised scores.
        targets: Token id per row (length L).
        positions: Rows that contribute to the loss.

    Returns:
        A scalar tensor; zero when ``positions`` is empty.

    Raises:
        IndexError: If a position or a target id is out of range.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"expected L×V logits, got shape {logits.shape}")
    n_rows, vocab = logits.shape
    pos = np.asarray(sorted(set(int(p) for p in positions)), dtype=np.int64)
    if pos.size == 0:
        return Tensor(0.0)
    if pos.min() < 0 or pos.max() >= n_rows:
        raise IndexError(f"position out of range for {n_rows} rows")
    tgt = np.asarray(targets, dtype=np.int64)[pos]
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise IndexError(f"target id out of range for vocabulary of size {vocab}")
    _check_finite(logits.data, "cross_entropy_at_positions")

    rows = logits.data[pos]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(pos.size), tgt]

    def backward_fn(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(pos.size), tgt] -= 1.0
        full = np.zeros(logits.shape)
        full[pos] = probs * g
        return (full,)

    return _result(np.asarray(nll.sum()), (logits,), backward_fn, "cross_entropy")


# Reverse mode


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every leaf that ``loss`` depends on.

    Leaves reached by the tape get ``d loss / d leaf``; gradients are written
    once, after the whole tape has been replayed.

    Raises:
        ContractError: If ``loss`` is not a scalar recorded on a tape.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a ComputeTape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: Dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, in_grad in zip(entry.inputs, entry.backward_fn(g)):
            if in_grad is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                leaves[id(inp)] = inp
            key = id(inp)
            grads[key] = grads[key] + in_grad if key in grads else np.array(in_grad)

    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros(leaf.shape))


# Verification


class FiniteDifferenceReport(TypedDict):
    max_rel_err: float
    max_abs_err: float
    worst: str
    n_checked: int
    passed: bool


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(
    f: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> FiniteDifferenceReport:
    """
    Compare reverse-mode gradients of ``f`` with central differences.

    Args:
        f: Scalar function of a parameter dictionary.
        params: Parameters to perturb; each needs ``requires_grad``.
        h: Perturbation step.
        tol: Maximum accepted relative error.

    Returns:
        A report with the worst relative error and whether it is within
        ``tol``.

    Raises:
        NumericError: If ``f`` evaluates to a non-finite value.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")

    def evaluate(values: Dict[str, Tensor]) -> float:
        out = f(values).item()
        if not math.isfinite(out):
            raise NumericError(f"finite_difference_check: f returned {out}")
        return out

    with ComputeTape():
        loss = f(params)
        if not math.isfinite(loss.item()):
            raise NumericError(f"finite_difference_check: f returned {loss.item()}")
        backward(loss)
    analytic = {
        name: (p.grad if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()
    }

    worst_rel, worst_abs, worst_name, n_checked = 0.0, 0.0, "", 0
    for name, param in params.items():
        base = param.data
        for index in np.ndindex(*base.shape):
            shifted = {}
            for sign in (1.0, -1.0):
                moved = base.copy()
                moved[index] += sign * h
                shifted[sign] = evaluate(
                    {**params, name: Tensor(moved, requires_grad=param.requires_grad)}
                )
            numeric = (shifted[1.0] - shifted[-1.0]) / (2.0 * h)
            exact = float(analytic[name][index])
            rel = float(relative_error(np.asarray(exact), np.asarray(numeric)))
            n_checked += 1
            worst_abs = max(worst_abs, abs(exact - numeric))
            if rel > worst_rel:
                worst_rel, worst_name = rel, f"{name}{list(index)}"

    return {
        "max_rel_err": worst_rel,
        "max_abs_err": worst_abs,
        "worst": worst_name,
        "n_checked": n_checked,
        "passed": worst_rel <= tol,
    }


# Optimisation


@dataclass
class AdamState:
    """First/second moment estimates and the step counter of AdamW."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    Apply one AdamW update and return new parameters and optimizer state.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient.

    Raises:
        DimensionError: If a gradient's shape differs from its parameter's.
        NumericError: If a gradient is not finite; the message names the
            parameter.
    """
    beta1, beta2 = betas
    step = state.step + 1
    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name in sorted(params):
        param = params[name]
        grad = grads.get(name)
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, expected {param.shape}")
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = beta1 * state.m.get(name, np.zeros(param.shape)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros(param.shape)) + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        value = param.data * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = Tensor(value, requires_grad=param.requires_grad, name=name)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)
