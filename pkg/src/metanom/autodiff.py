"""Minimal reverse-mode autodiff over dense 2-D float64 matrices.

A forward pass records one closure per primitive onto a Tape; calling
``Tape.backward`` on a scalar node replays the closures in exact reverse
execution order, accumulating gradients additively into every reachable
leaf. All reductions use numpy's fixed-order summation, so two identical
forward passes produce bit-identical values and gradients.

Tapes are single-threaded: build and sweep one tape per thread. Matrices
are immutable once written by a forward pass, so read-only evaluation of
independent tapes may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NonFiniteError, ParameterError

BCE_PROB_EPS = 1e-7
INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {context}")


class ValueMatrix:
    """Dense rows x cols float64 matrix with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"ValueMatrix needs a 2-D array, got ndim={arr.ndim}")
        _check_finite(arr, "ValueMatrix data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(arr) if requires_grad else None
        )

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        _check_finite(g, "gradient")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"ValueMatrix({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


def matrix(data, requires_grad: bool = False) -> ValueMatrix:
    """Wrap array-like data (including a bare scalar) as a ValueMatrix leaf."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return ValueMatrix(arr, requires_grad=requires_grad)


class Tape:
    """Ordered record of executed primitives for one reverse sweep."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, backward_fn: Callable[[], None]) -> None:
        self._ops.append(backward_fn)

    def backward(self, loss: ValueMatrix) -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the tape in reverse order."""
        if loss.shape != (1, 1):
            raise DimensionError(f"backward needs a scalar loss node, got {loss.shape}")
        if loss.requires_grad:
            loss.accumulate_grad(np.ones((1, 1)))
        for op in reversed(self._ops):
            op()


def _out(tape: Tape, data: np.ndarray, inputs: tuple[ValueMatrix, ...],
         make_backward, context: str) -> ValueMatrix:
    _check_finite(data, context)
    needs = any(v.requires_grad for v in inputs)
    out = ValueMatrix(data, requires_grad=False)
    out.requires_grad = needs
    if needs:
        tape._record(make_backward(out))
    return out


def _grad_of(node: ValueMatrix) -> Optional[np.ndarray]:
    # None when this branch never contributed to the loss.
    return node.grad


# ---------------------------------------------------------------------------
# primitives


def matmul(tape: Tape, a: ValueMatrix, b: ValueMatrix) -> ValueMatrix:
    """Matrix product; backward gives g @ b^T and a^T @ g."""
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        return bw

    return _out(tape, data, (a, b), make, "matmul output")


def _reduce_to(shape: tuple[int, int], g: np.ndarray) -> np.ndarray:
    """Sum g down to a broadcast operand's shape ((1,c), (1,1) or full)."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum(keepdims=True).reshape(1, 1)
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _broadcast_ok(a: ValueMatrix, b: ValueMatrix) -> None:
    if a.shape == b.shape:
        return
    if b.shape == (1, 1):
        return
    if b.rows == 1 and b.cols == a.cols:
        return
    raise DimensionError(f"operands not broadcastable: {a.shape} vs {b.shape}")


def add(tape: Tape, a: ValueMatrix, b: ValueMatrix) -> ValueMatrix:
    """Elementwise a + b; b may be a (1,c) row vector or (1,1) scalar."""
    _broadcast_ok(a, b)
    data = a.data + b.data

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(b.shape, g))
        return bw

    return _out(tape, data, (a, b), make, "add output")


def sub(tape: Tape, a: ValueMatrix, b: ValueMatrix) -> ValueMatrix:
    """Elementwise a - b with the same broadcast rules as add."""
    _broadcast_ok(a, b)
    data = a.data - b.data

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(-_reduce_to(b.shape, g))
        return bw

    return _out(tape, data, (a, b), make, "sub output")


def mul(tape: Tape, a: ValueMatrix, b: ValueMatrix) -> ValueMatrix:
    """Elementwise a * b; b may be a (1,c) row vector or (1,1) scalar."""
    _broadcast_ok(a, b)
    data = a.data * b.data

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(b.shape, g * a.data))
        return bw

    return _out(tape, data, (a, b), make, "mul output")


def scale(tape: Tape, a: ValueMatrix, c: float) -> ValueMatrix:
    """a * c for a plain float constant."""
    data = a.data * c

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g * c)
        return bw

    return _out(tape, data, (a,), make, "scale output")


def add_const(tape: Tape, a: ValueMatrix, c: float) -> ValueMatrix:
    """a + c for a plain float constant."""
    data = a.data + c

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g)
        return bw

    return _out(tape, data, (a,), make, "add_const output")


def scale_cols(tape: Tape, a: ValueMatrix, weights: np.ndarray) -> ValueMatrix:
    """Multiply each column j by the constant weights[j]."""
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != a.cols:
        raise DimensionError(f"scale_cols weights length {w.shape[1]} != cols {a.cols}")
    data = a.data * w

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g * w)
        return bw

    return _out(tape, data, (a,), make, "scale_cols output")


def gelu(tape: Tape, x: ValueMatrix) -> ValueMatrix:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * INV_SQRT2))
    data = x.data * cdf

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if x.requires_grad:
                pdf = INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
                x.accumulate_grad(g * (cdf + x.data * pdf))
        return bw

    return _out(tape, data, (x,), make, "gelu output")


def relu(tape: Tape, x: ValueMatrix) -> ValueMatrix:
    """max(0, x); subgradient 0 at the kink."""
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if x.requires_grad:
                x.accumulate_grad(g * mask)
        return bw

    return _out(tape, data, (x,), make, "relu output")


def exp(tape: Tape, x: ValueMatrix) -> ValueMatrix:
    data = np.exp(x.data)

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if x.requires_grad:
                x.accumulate_grad(g * data)
        return bw

    return _out(tape, data, (x,), make, "exp output")


def log(tape: Tape, x: ValueMatrix) -> ValueMatrix:
    if (x.data <= 0.0).any():
        raise ParameterError("log needs strictly positive entries")
    data = np.log(x.data)

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if x.requires_grad:
                x.accumulate_grad(g / x.data)
        return bw

    return _out(tape, data, (x,), make, "log output")


def layer_norm(tape: Tape, x: ValueMatrix, gain: ValueMatrix, bias: ValueMatrix,
               eps: float = 1e-5) -> ValueMatrix:
    """Per-row normalization (population variance) followed by affine gain/bias."""
    if x.cols < 2:
        raise DimensionError("layer_norm needs at least 2 columns per row")
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise DimensionError("layer_norm gain/bias must be (1, cols)")
    if eps <= 0.0:
        raise ParameterError("layer_norm eps must be positive")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if gain.requires_grad:
                gain.accumulate_grad((g * xhat).sum(axis=0, keepdims=True))
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=0, keepdims=True))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                x.accumulate_grad(inv_std * (dxhat - m1 - xhat * m2))
        return bw

    return _out(tape, data, (x, gain, bias), make, "layer_norm output")


def softmax_temp(tape: Tape, logits: ValueMatrix,
                 t: Union[float, ValueMatrix]) -> ValueMatrix:
    """Per-row softmax of logits / t, stable via max subtraction.

    t may be a plain positive float or a (1,1) node; in the latter case the
    temperature participates in the tape and receives gradients.
    """
    t_node = t if isinstance(t, ValueMatrix) else None
    if t_node is not None and t_node.shape != (1, 1):
        raise DimensionError("temperature node must be 1x1")
    t_val = t_node.item() if t_node is not None else float(t)
    if t_val <= 0.0:
        raise ParameterError(f"temperature must be positive, got {t_val}")

    shifted = (logits.data - logits.data.max(axis=1, keepdims=True)) / t_val
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    inputs = (logits,) if t_node is None else (logits, t_node)

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            gs_dot = (g * s).sum(axis=1, keepdims=True)
            if logits.requires_grad:
                logits.accumulate_grad((s * (g - gs_dot)) / t_val)
            if t_node is not None and t_node.requires_grad:
                sl_dot = (s * logits.data).sum(axis=1, keepdims=True)
                dt = (g * s * (sl_dot - logits.data)).sum() / (t_val * t_val)
                t_node.accumulate_grad(np.array([[dt]]))
        return bw

    return _out(tape, s, inputs, make, "softmax_temp output")


def select_col(tape: Tape, a: ValueMatrix, j: int) -> ValueMatrix:
    """Column j of a as an (n,1) matrix."""
    if not 0 <= j < a.cols:
        raise DimensionError(f"column {j} out of range for {a.shape}")
    data = a.data[:, j:j + 1].copy()

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[:, j:j + 1] = g
                a.accumulate_grad(full)
        return bw

    return _out(tape, data, (a,), make, "select_col output")


def gather_cols(tape: Tape, a: ValueMatrix, col_idx: np.ndarray) -> ValueMatrix:
    """Per-row column gather: out[i, 0] = a[i, col_idx[i]]."""
    idx = np.asarray(col_idx, dtype=np.intp)
    if idx.shape != (a.rows,):
        raise DimensionError(f"gather index shape {idx.shape} != ({a.rows},)")
    rows = np.arange(a.rows)
    data = a.data[rows, idx].reshape(-1, 1)

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[rows, idx] = g[:, 0]
                a.accumulate_grad(full)
        return bw

    return _out(tape, data, (a,), make, "gather_cols output")


def mean_all(tape: Tape, a: ValueMatrix) -> ValueMatrix:
    """Arithmetic mean over all entries as a 1x1 node."""
    n = a.data.size
    data = np.array([[a.data.sum() / n]])

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(np.full_like(a.data, g[0, 0] / n))
        return bw

    return _out(tape, data, (a,), make, "mean_all output")


def sum_all(tape: Tape, a: ValueMatrix) -> ValueMatrix:
    """Sum over all entries as a 1x1 node."""
    data = np.array([[a.data.sum()]])

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(np.full_like(a.data, g[0, 0]))
        return bw

    return _out(tape, data, (a,), make, "sum_all output")


def bce(p: float, target: int) -> float:
    """Scalar binary cross-entropy with the probability clamped away from 0/1."""
    if target not in (0, 1):
        raise ParameterError(f"bce target must be 0 or 1, got {target}")
    q = min(max(float(p), BCE_PROB_EPS), 1.0 - BCE_PROB_EPS)
    return -(target * np.log(q) + (1 - target) * np.log(1.0 - q))


def bce_loss(tape: Tape, p: ValueMatrix, target: int) -> ValueMatrix:
    """Mean binary cross-entropy of an (n,1) probability column against 0 or 1.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; clamped
    entries receive zero gradient, matching the flat clamped region.
    """
    if target not in (0, 1):
        raise ParameterError(f"bce target must be 0 or 1, got {target}")
    if p.cols != 1:
        raise DimensionError(f"bce_loss needs an (n,1) column, got {p.shape}")
    n = p.rows
    if n == 0:
        raise DimensionError("bce_loss on an empty batch")
    q = np.clip(p.data, BCE_PROB_EPS, 1.0 - BCE_PROB_EPS)
    unclamped = (p.data > BCE_PROB_EPS) & (p.data < 1.0 - BCE_PROB_EPS)
    if target == 1:
        losses = -np.log(q)
    else:
        losses = -np.log(1.0 - q)
    data = np.array([[losses.sum() / n]])

    def make(out):
        def bw():
            g = _grad_of(out)
            if g is None:
                return
            if p.requires_grad:
                if target == 1:
                    dp = -1.0 / q
                else:
                    dp = 1.0 / (1.0 - q)
                p.accumulate_grad(np.where(unclamped, dp, 0.0) * (g[0, 0] / n))
        return bw

    return _out(tape, data, (p,), make, "bce_loss output")


# ---------------------------------------------------------------------------
# seeded randomness


@dataclass(frozen=True)
class RngState:
    """Splittable seeded RNG: identical seed gives an identical stream and
    ``substream(i)`` gives independent per-index streams."""

    seed: int
    spawn_key: tuple[int, ...] = field(default_factory=tuple)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, index: int) -> "RngState":
        return RngState(self.seed, self.spawn_key + (int(index),))
