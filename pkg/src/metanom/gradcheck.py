"""Central finite-difference checks for every primitive and composed loss.

The numeric side only ever calls forward passes, so it stays independent of
the tape's backward closures. Relative errors use a floored denominator:
err = |a - n| / max(|a|, |n|, 1e-6), which degrades to a 1e-10 absolute
tolerance for near-zero gradients at the 1e-4 threshold.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import model as mdl
from .autodiff import RngState, Tape, ValueMatrix
from .errors import InvariantViolationError

FD_STEP = 1e-5
TOLERANCE = 1e-4
_DENOM_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], arr: np.ndarray,
                 coords, h: float = FD_STEP) -> np.ndarray:
    """Central differences of f with respect to arr at the given (i,j) coords."""
    vals = []
    for i, j in coords:
        orig = arr[i, j]
        arr[i, j] = orig + h
        fp = f()
        arr[i, j] = orig - h
        fm = f()
        arr[i, j] = orig
        vals.append((fp - fm) / (2.0 * h))
    return np.asarray(vals)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _DENOM_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _sample_coords(gen: np.random.Generator, shape, k: int):
    total = shape[0] * shape[1]
    take = min(k, total)
    flat = gen.choice(total, size=take, replace=False)
    return [(int(i) // shape[1], int(i) % shape[1]) for i in flat]


def _per_buffer_quota(shapes: list[tuple[int, int]], min_total: int) -> int:
    """Smallest per-buffer coordinate count whose clipped sum reaches
    min_total (or every coordinate if the buffers are too small)."""
    sizes = [r * c for r, c in shapes]
    quota = max(2, -(-min_total // len(sizes)))
    while sum(min(quota, s) for s in sizes) < min(min_total, sum(sizes)):
        quota += 1
    return quota


def _graph_check(forward: Callable[[], ValueMatrix],
                 leaves: dict[str, ValueMatrix],
                 gen: np.random.Generator, coords_per_leaf: int = 6) -> float:
    """forward() must build a fresh tape, return the scalar loss node, and
    leave gradients accumulated on the leaves when called via backward."""

    def run_backward() -> float:
        for leaf in leaves.values():
            leaf.zero_grad()
        tape = Tape()
        loss = forward(tape)
        tape.backward(loss)
        return loss.item()

    def run_forward() -> float:
        tape = Tape()
        return forward(tape).item()

    for leaf in leaves.values():
        leaf.requires_grad = True
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    run_backward()
    worst = 0.0
    for leaf in leaves.values():
        coords = _sample_coords(gen, leaf.shape, coords_per_leaf)
        analytic = np.array([leaf.grad[i, j] for i, j in coords])
        numeric = numeric_grad(run_forward, leaf.data, coords)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def _weighted_mean(tape: Tape, node: ValueMatrix, w: np.ndarray) -> ValueMatrix:
    # Random output weights exercise non-uniform upstream gradients.
    return ad.mean_all(tape, ad.mul(tape, node, ValueMatrix(w)))


def check_primitives(seed: int = 0) -> dict[str, float]:
    gen = RngState(seed).generator()
    report: dict[str, float] = {}

    a = ValueMatrix(gen.standard_normal((4, 5)))
    b = ValueMatrix(gen.standard_normal((5, 3)))
    w = gen.standard_normal((4, 3))
    report["matmul"] = _graph_check(
        lambda t: _weighted_mean(t, ad.matmul(t, a, b), w), {"a": a, "b": b}, gen)

    x = ValueMatrix(gen.standard_normal((3, 6)))
    bias = ValueMatrix(gen.standard_normal((1, 6)))
    w = gen.standard_normal((3, 6))
    report["add"] = _graph_check(
        lambda t: _weighted_mean(t, ad.add(t, x, bias), w),
        {"x": x, "bias": bias}, gen)

    x = ValueMatrix(gen.standard_normal((3, 6)))
    y = ValueMatrix(gen.standard_normal((3, 6)))
    report["mul"] = _graph_check(
        lambda t: _weighted_mean(t, ad.mul(t, x, y), w), {"x": x, "y": y}, gen)

    x = ValueMatrix(gen.standard_normal((4, 6)))
    w = gen.standard_normal((4, 6))
    report["gelu"] = _graph_check(
        lambda t: _weighted_mean(t, ad.gelu(t, x), w), {"x": x}, gen)

    x = ValueMatrix(gen.standard_normal((4, 6)) + 0.05)  # keep off the kink
    report["relu"] = _graph_check(
        lambda t: _weighted_mean(t, ad.relu(t, x), w), {"x": x}, gen)

    x = ValueMatrix(0.5 * gen.standard_normal((4, 6)))
    report["exp"] = _graph_check(
        lambda t: _weighted_mean(t, ad.exp(t, x), w), {"x": x}, gen)

    x = ValueMatrix(gen.uniform(0.2, 3.0, size=(4, 6)))
    report["log"] = _graph_check(
        lambda t: _weighted_mean(t, ad.log(t, x), w), {"x": x}, gen)

    x = ValueMatrix(gen.standard_normal((2, 6)))
    gain = ValueMatrix(gen.uniform(0.5, 1.5, size=(1, 6)))
    lbias = ValueMatrix(gen.standard_normal((1, 6)))
    w = gen.standard_normal((2, 6))
    report["layer_norm"] = _graph_check(
        lambda t: _weighted_mean(t, ad.layer_norm(t, x, gain, lbias), w),
        {"x": x, "gain": gain, "bias": lbias}, gen)

    logits = ValueMatrix(gen.standard_normal((5, 3)))
    t_leaf = ValueMatrix(np.array([[1.3]]))
    w = gen.standard_normal((5, 3))
    report["softmax_temp"] = _graph_check(
        lambda t: _weighted_mean(t, ad.softmax_temp(t, logits, t_leaf), w),
        {"logits": logits, "t": t_leaf}, gen)

    p = ValueMatrix(gen.uniform(0.05, 0.95, size=(6, 1)))
    report["bce"] = _graph_check(
        lambda t: ad.add(t, ad.bce_loss(t, p, 1),
                         ad.scale(t, ad.bce_loss(t, p, 0), 0.5)),
        {"p": p}, gen)

    x = ValueMatrix(gen.standard_normal((4, 3)))
    idx = gen.integers(0, 3, size=4)
    report["gather_cols"] = _graph_check(
        lambda t: ad.mean_all(t, ad.gather_cols(t, x, idx)), {"x": x}, gen)

    return report


def _small_model(gen: np.random.Generator, input_dim: int = 6,
                 latent: int = 8, hidden: int = 12) -> mdl.ModelState:
    cfg = mdl.ModelConfig(input_dim=input_dim, latent_dim=latent,
                          hidden_dim=hidden, n_residual_blocks=1)
    state = mdl.init_model(cfg, int(gen.integers(0, 2**31)))
    # nudge the temperature off its init so its gradient path is generic
    state.params[mdl.LOG_TEMPERATURE].data[0, 0] = 0.2
    return state


def check_inner_loss(seed: int = 0, min_coords: int = 50) -> float:
    """FD check of the inner loss against every theta and phi buffer."""
    gen = RngState(seed).generator()
    state = _small_model(gen)
    x = ValueMatrix(gen.standard_normal((8, state.config.input_dim)))
    var = gen.uniform(0.5, 2.0, size=state.config.input_dim)
    cfg = ls.InnerLossConfig(lambda_rec=0.05)
    state.set_trainable(theta=True, phi=True, temperature=False)

    names = state.theta_names() + state.phi_names()
    per_buf = _per_buffer_quota([state.params[n].shape for n in names], min_coords)

    def forward() -> float:
        return ls.inner_loss(Tape(), x, state, cfg, var).item()

    state.zero_grads()
    tape = Tape()
    loss = ls.inner_loss(tape, x, state, cfg, var)
    tape.backward(loss)

    worst = 0.0
    for name in names:
        p = state.params[name]
        coords = _sample_coords(gen, p.shape, per_buf)
        analytic = np.array([p.grad[i, j] for i, j in coords])
        numeric = numeric_grad(forward, p.data, coords)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def check_outer_loss(seed: int = 0, min_coords: int = 50) -> float:
    """FD check of the outer loss for phi and log-temperature, with theta
    frozen; raises if any gradient mass lands in a theta buffer."""
    gen = RngState(seed).generator()
    state = _small_model(gen, input_dim=8, latent=16, hidden=16)
    id_q = ValueMatrix(gen.standard_normal((8, state.config.input_dim)))
    ood_q = ValueMatrix(gen.standard_normal((8, state.config.input_dim)) + 1.0)
    cfg = ls.OuterLossConfig(margin_m=0.5, alpha=0.1, learn_temperature=True)
    state.set_trainable(theta=False, phi=True, temperature=True)

    def forward() -> float:
        return ls.outer_loss(Tape(), id_q, ood_q, state, cfg).item()

    state.zero_grads()
    tape = Tape()
    loss = ls.outer_loss(tape, id_q, ood_q, state, cfg)
    grads = ls.meta_gradient(tape, loss, state, cfg.learn_temperature)

    for name in state.theta_names():
        g = state.params[name].grad
        if g is not None and np.any(g != 0.0):
            raise InvariantViolationError(f"theta buffer {name} received gradient")

    names = list(grads)
    per_buf = _per_buffer_quota([state.params[n].shape for n in names], min_coords)
    worst = 0.0
    for name in names:
        p = state.params[name]
        coords = _sample_coords(gen, p.shape, per_buf)
        analytic = np.array([grads[name][i, j] for i, j in coords])
        numeric = numeric_grad(forward, p.data, coords)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def check_model_paths(seed: int = 0) -> dict[str, float]:
    """FD checks through encode/decode/classify with respect to the input."""
    gen = RngState(seed).generator()
    state = _small_model(gen)
    report: dict[str, float] = {}

    x = ValueMatrix(gen.standard_normal((4, state.config.input_dim)))
    report["encode_wrt_input"] = _graph_check(
        lambda t: ad.mean_all(t, mdl.encode(t, x, state)), {"x": x}, gen)

    z = ValueMatrix(gen.standard_normal((4, state.config.latent_dim)))
    report["decode_wrt_latent"] = _graph_check(
        lambda t: ad.mean_all(t, mdl.decode(t, z, state)), {"z": z}, gen)

    x2 = ValueMatrix(gen.standard_normal((4, state.config.input_dim)))
    report["confidence_wrt_input"] = _graph_check(
        lambda t: ad.mean_all(t, mdl.normal_confidence(t, x2, state, 1.5)),
        {"x": x2}, gen)
    return report


def run_all(seed: int = 0) -> dict[str, float]:
    """The full suite; keys map to max relative errors against FD_STEP
    central differences."""
    report = check_primitives(seed)
    report.update(check_model_paths(seed))
    report["inner_loss"] = check_inner_loss(seed)
    report["outer_loss"] = check_outer_loss(seed)
    return report
