"""Training objectives.

Inner loop: one-class BCE on normal data (all targets 1, temperature fixed
at 1) plus a variance-normalized reconstruction term. Outer loop: calibrated
BCE on a balanced ID/OOD query at the live temperature, plus a hinge on the
mean confidence gap; the encoder-decoder parameters are frozen there, so the
outer gradient flows only through the head and the temperature (first-order
scheme, no hypergradient through the inner optimum).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tape, ValueMatrix
from .errors import (ConfigError, DimensionError, InvariantViolationError,
                     ParameterError)

VARIANCE_FLOOR = 1e-8

# Shipped margin presets: the wide default and a narrow alternative.
MARGIN_WIDE = 0.5
MARGIN_NARROW = 0.05


@dataclass(frozen=True)
class InnerLossConfig:
    lambda_rec: float = 0.01
    # Optional variant that evaluates the inner confidence at the live,
    # trainable temperature instead of the fixed T=1.
    learn_temperature: bool = False

    def __post_init__(self):
        if self.lambda_rec < 0:
            raise ConfigError("lambda_rec must be non-negative")


@dataclass(frozen=True)
class OuterLossConfig:
    margin_m: float = MARGIN_WIDE
    alpha: float = 0.1
    learn_temperature: bool = True

    def __post_init__(self):
        if self.margin_m <= 0:
            raise ConfigError("margin_m must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")


# ---------------------------------------------------------------------------
# pieces


def reconstruction_loss(tape: Tape, x: ValueMatrix, x_hat: ValueMatrix,
                        feature_variance: np.ndarray) -> ValueMatrix:
    """Mean over samples and features of (x_hat - x)^2 / var_j.

    var_j is the per-feature variance fitted on the ID training pool,
    floored at 1e-8.
    """
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    var = np.asarray(feature_variance, dtype=np.float64).reshape(-1)
    if var.shape[0] != x.cols:
        raise DimensionError(f"feature_variance length {var.shape[0]} != {x.cols}")
    if not np.isfinite(var).all():
        raise ParameterError("feature_variance must be finite")
    var = np.maximum(var, VARIANCE_FLOOR)
    d = ad.sub(tape, x_hat, x)
    sq = ad.mul(tape, d, d)
    weighted = ad.scale_cols(tape, sq, 1.0 / var)
    return ad.mean_all(tape, weighted)


def inner_loss(tape: Tape, id_batch: ValueMatrix, state: mdl.ModelState,
               cfg: InnerLossConfig,
               feature_variance: Optional[np.ndarray] = None) -> ValueMatrix:
    """One-class objective on a batch of normal rows (caller guarantees
    provenance): mean BCE(p_normal, 1) + lambda_rec * reconstruction."""
    if id_batch.rows == 0:
        raise DimensionError("inner_loss on an empty batch")
    z = mdl.encode(tape, id_batch, state)
    logits = mdl.classify(tape, z, state)
    t = mdl.temperature_node(tape, state) if cfg.learn_temperature else 1.0
    p0 = ad.select_col(tape, ad.softmax_temp(tape, logits, t), mdl.NORMAL_CLASS)
    loss = ad.bce_loss(tape, p0, 1)
    if cfg.lambda_rec > 0:
        if feature_variance is None:
            raise ParameterError("feature_variance required when lambda_rec > 0")
        x_hat = mdl.decode(tape, z, state)
        rec = reconstruction_loss(tape, id_batch, x_hat, feature_variance)
        loss = ad.add(tape, loss, ad.scale(tape, rec, cfg.lambda_rec))
    return loss


def margin_gap(id_scores, ood_scores) -> float:
    """Mean normal-confidence on ID minus mean on OOD; may be negative."""
    id_arr = np.asarray(id_scores, dtype=np.float64)
    ood_arr = np.asarray(ood_scores, dtype=np.float64)
    if id_arr.size == 0 or ood_arr.size == 0:
        raise DimensionError("margin_gap needs non-empty score lists")
    return float(id_arr.mean() - ood_arr.mean())


def margin_hinge(g_hat: float, margin_m: float) -> float:
    """[m - g]_+ with subgradient 0 at the kink."""
    if margin_m <= 0:
        raise ParameterError("margin_m must be positive")
    return max(0.0, margin_m - g_hat)


def margin_gap_node(tape: Tape, id_conf: ValueMatrix,
                    ood_conf: ValueMatrix) -> ValueMatrix:
    if id_conf.rows == 0 or ood_conf.rows == 0:
        raise DimensionError("margin_gap needs non-empty score columns")
    return ad.sub(tape, ad.mean_all(tape, id_conf), ad.mean_all(tape, ood_conf))


def margin_hinge_node(tape: Tape, g_hat: ValueMatrix,
                      margin_m: float) -> ValueMatrix:
    if margin_m <= 0:
        raise ParameterError("margin_m must be positive")
    return ad.relu(tape, ad.add_const(tape, ad.scale(tape, g_hat, -1.0), margin_m))


def _require_frozen_theta(state: mdl.ModelState) -> None:
    live = [n for n in state.theta_names() if state.params[n].requires_grad]
    if live:
        raise InvariantViolationError(
            f"outer loss needs frozen encoder-decoder parameters; trainable: {live[:3]}")


def outer_loss(tape: Tape, id_query: ValueMatrix, ood_query: ValueMatrix,
               state: mdl.ModelState, cfg: OuterLossConfig) -> ValueMatrix:
    """Calibrated BCE + margin hinge on a balanced query, at the live T.

    L = mean BCE(p_normal(ID), 1) + mean BCE(p_normal(OOD), 0)
        + alpha * [m - (mean p_ID - mean p_OOD)]_+

    The caller must have frozen theta (requires_grad False on every encoder
    and decoder buffer); gradients then reach only phi and, when enabled,
    the log-temperature.
    """
    if id_query.rows == 0 or ood_query.rows == 0:
        raise DimensionError("outer_loss needs non-empty ID and OOD queries")
    _require_frozen_theta(state)
    t = mdl.temperature_node(tape, state)
    p_id = mdl.normal_confidence(tape, id_query, state, t)
    p_ood = mdl.normal_confidence(tape, ood_query, state, t)
    l_id = ad.bce_loss(tape, p_id, 1)
    l_ood = ad.bce_loss(tape, p_ood, 0)
    g_hat = margin_gap_node(tape, p_id, p_ood)
    hinge = margin_hinge_node(tape, g_hat, cfg.margin_m)
    return ad.add(tape, ad.add(tape, l_id, l_ood), ad.scale(tape, hinge, cfg.alpha))


def meta_gradient(tape: Tape, loss: ValueMatrix, state: mdl.ModelState,
                  learn_temperature: bool) -> dict[str, np.ndarray]:
    """One reverse sweep; returns gradients for phi and, when enabled, the
    log-temperature. Any gradient mass in a theta buffer is an internal
    invariant violation."""
    tape.backward(loss)
    for name in state.theta_names():
        g = state.params[name].grad
        if g is not None and np.any(g != 0.0):
            raise InvariantViolationError(f"gradient leaked into frozen {name}")
    out: dict[str, np.ndarray] = {}
    for name in state.phi_names():
        g = state.params[name].grad
        out[name] = (np.zeros_like(state.params[name].data) if g is None
                     else g.copy())
    if learn_temperature:
        g = state.params[mdl.LOG_TEMPERATURE].grad
        out[mdl.LOG_TEMPERATURE] = (np.zeros((1, 1)) if g is None else g.copy())
    return out
