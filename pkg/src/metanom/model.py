"""Residual dense encoder-decoder with a shallow two-logit classifier head.

The encoder maps inputs to a latent space through residual fully connected
blocks (LayerNorm -> linear -> GELU -> linear, additive skip); the decoder
mirrors it back; the head is LayerNorm plus one linear map to two logits,
index 0 being the normal class. A positive temperature, stored as the exp
of an unconstrained scalar, divides the logits before the softmax.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tape, ValueMatrix
from .errors import ConfigError, DimensionError

CHECKPOINT_MAGIC = b"METANOMCKPT1"

THETA_ENC_PREFIX = "enc."
THETA_DEC_PREFIX = "dec."
PHI_PREFIX = "head."
LOG_TEMPERATURE = "log_t"

NORMAL_CLASS = 0
ANOMALY_CLASS = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    latent_dim: int = 128
    hidden_dim: int = 256
    n_residual_blocks: int = 2
    n_logits: int = 2

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if min(self.latent_dim, self.hidden_dim, self.n_residual_blocks) < 1:
            raise ConfigError("latent_dim, hidden_dim, n_residual_blocks must be >= 1")
        if self.n_logits != 2:
            raise ConfigError("the head is fixed at 2 logits (normal=0, anomaly=1)")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "hidden_dim": self.hidden_dim,
            "n_residual_blocks": self.n_residual_blocks,
            "n_logits": self.n_logits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _stack_param_specs(prefix: str, in_dim: int, hidden: int, out_dim: int,
                       n_blocks: int) -> list[tuple[str, int, int]]:
    specs = [(f"{prefix}in.w", in_dim, hidden), (f"{prefix}in.b", 1, hidden)]
    for i in range(n_blocks):
        p = f"{prefix}blk{i}."
        specs += [
            (f"{p}ln.g", 1, hidden),
            (f"{p}ln.b", 1, hidden),
            (f"{p}fc1.w", hidden, hidden),
            (f"{p}fc1.b", 1, hidden),
            (f"{p}fc2.w", hidden, hidden),
            (f"{p}fc2.b", 1, hidden),
        ]
    specs += [(f"{prefix}out.w", hidden, out_dim), (f"{prefix}out.b", 1, out_dim)]
    return specs


def parameter_specs(config: ModelConfig) -> list[tuple[str, int, int]]:
    """Ordered (name, rows, cols) for every trainable buffer in the model."""
    d, h, m = config.input_dim, config.hidden_dim, config.latent_dim
    specs = _stack_param_specs(THETA_ENC_PREFIX, d, h, m, config.n_residual_blocks)
    specs += _stack_param_specs(THETA_DEC_PREFIX, m, h, d, config.n_residual_blocks)
    specs += [
        (f"{PHI_PREFIX}ln.g", 1, m),
        (f"{PHI_PREFIX}ln.b", 1, m),
        (f"{PHI_PREFIX}fc.w", m, config.n_logits),
        (f"{PHI_PREFIX}fc.b", 1, config.n_logits),
        (LOG_TEMPERATURE, 1, 1),
    ]
    return specs


def _init_value(name: str, rows: int, cols: int,
                gen: np.random.Generator) -> np.ndarray:
    if name.endswith("ln.g"):
        return np.ones((rows, cols))
    if name.endswith(".w"):
        bound = np.sqrt(1.0 / rows)
        return gen.uniform(-bound, bound, size=(rows, cols))
    # biases, layer-norm shifts and the log-temperature start at zero
    return np.zeros((rows, cols))


class ModelState:
    """All trainable buffers of one model, partitioned into theta (encoder +
    decoder), phi (head) and the unconstrained log-temperature."""

    def __init__(self, config: ModelConfig, params: dict[str, ValueMatrix],
                 seed: int):
        self.config = config
        self.params = params
        self.seed = seed

    # -- partition ----------------------------------------------------------

    def param_names(self) -> list[str]:
        return [name for name, _, _ in parameter_specs(self.config)]

    def theta_names(self) -> list[str]:
        return [n for n in self.param_names()
                if n.startswith((THETA_ENC_PREFIX, THETA_DEC_PREFIX))]

    def phi_names(self) -> list[str]:
        return [n for n in self.param_names() if n.startswith(PHI_PREFIX)]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.params[LOG_TEMPERATURE].item()))

    # -- bookkeeping ---------------------------------------------------------

    def set_trainable(self, theta: bool, phi: bool, temperature: bool) -> None:
        for name, p in self.params.items():
            if name == LOG_TEMPERATURE:
                p.requires_grad = temperature
            elif name.startswith(PHI_PREFIX):
                p.requires_grad = phi
            else:
                p.requires_grad = theta
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "ModelState":
        params = {n: ValueMatrix(p.data.copy()) for n, p in self.params.items()}
        return ModelState(self.config, params, self.seed)

    def theta_digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in self.theta_names():
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Deterministic fan-in uniform init; temperature starts at 1."""
    gen = RngState(seed).generator()
    params = {}
    for name, rows, cols in parameter_specs(config):
        params[name] = ValueMatrix(_init_value(name, rows, cols, gen))
    return ModelState(config, params, seed)


# ---------------------------------------------------------------------------
# forward passes


def _stack_forward(tape: Tape, x: ValueMatrix, prefix: str,
                   state: ModelState) -> ValueMatrix:
    p = state.params
    h = ad.add(tape, ad.matmul(tape, x, p[f"{prefix}in.w"]), p[f"{prefix}in.b"])
    for i in range(state.config.n_residual_blocks):
        b = f"{prefix}blk{i}."
        u = ad.layer_norm(tape, h, p[f"{b}ln.g"], p[f"{b}ln.b"])
        u = ad.add(tape, ad.matmul(tape, u, p[f"{b}fc1.w"]), p[f"{b}fc1.b"])
        u = ad.gelu(tape, u)
        u = ad.add(tape, ad.matmul(tape, u, p[f"{b}fc2.w"]), p[f"{b}fc2.b"])
        h = ad.add(tape, h, u)
    return ad.add(tape, ad.matmul(tape, h, p[f"{prefix}out.w"]), p[f"{prefix}out.b"])


def encode(tape: Tape, x: ValueMatrix, state: ModelState) -> ValueMatrix:
    if x.cols != state.config.input_dim:
        raise DimensionError(
            f"encode expects {state.config.input_dim} columns, got {x.cols}")
    return _stack_forward(tape, x, THETA_ENC_PREFIX, state)


def decode(tape: Tape, z: ValueMatrix, state: ModelState) -> ValueMatrix:
    if z.cols != state.config.latent_dim:
        raise DimensionError(
            f"decode expects {state.config.latent_dim} columns, got {z.cols}")
    return _stack_forward(tape, z, THETA_DEC_PREFIX, state)


def classify(tape: Tape, z: ValueMatrix, state: ModelState) -> ValueMatrix:
    if z.cols != state.config.latent_dim:
        raise DimensionError(
            f"classify expects {state.config.latent_dim} columns, got {z.cols}")
    p = state.params
    u = ad.layer_norm(tape, z, p[f"{PHI_PREFIX}ln.g"], p[f"{PHI_PREFIX}ln.b"])
    return ad.add(tape, ad.matmul(tape, u, p[f"{PHI_PREFIX}fc.w"]),
                  p[f"{PHI_PREFIX}fc.b"])


def temperature_node(tape: Tape, state: ModelState) -> ValueMatrix:
    """T = exp(log_t) as a tape node, so T > 0 by construction and the
    log-temperature can receive gradients."""
    return ad.exp(tape, state.params[LOG_TEMPERATURE])


def normal_confidence(tape: Tape, x: ValueMatrix, state: ModelState,
                      t: Union[float, ValueMatrix, None] = None) -> ValueMatrix:
    """Softmax probability of the normal class (index 0) as an (n,1) node.

    ``t`` is the temperature: a float, an existing tape node, or None for
    the model's live temperature. With two logits this equals
    sigmoid((l0 - l1) / T).
    """
    if t is None:
        t = temperature_node(tape, state)
    logits = classify(tape, encode(tape, x, state), state)
    probs = ad.softmax_temp(tape, logits, t)
    return ad.select_col(tape, probs, NORMAL_CLASS)


def anomaly_score_node(tape: Tape, x: ValueMatrix, state: ModelState,
                       t: Union[float, ValueMatrix, None] = None) -> ValueMatrix:
    """1 - normal_confidence, the single score used everywhere downstream."""
    p = normal_confidence(tape, x, state, t)
    return ad.sub(tape, ad.matrix(np.ones((p.rows, 1))), p)


# -- inference over plain arrays (no gradients) -----------------------------


def _forward_logits(state: ModelState, x: np.ndarray) -> np.ndarray:
    tape = Tape()
    xm = ValueMatrix(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return classify(tape, encode(tape, xm, state), state).data


def normal_confidence_values(state: ModelState, x: np.ndarray,
                             t: Optional[float] = None) -> np.ndarray:
    tape = Tape()
    logits = ValueMatrix(_forward_logits(state, x))
    t_val = state.temperature if t is None else t
    probs = ad.softmax_temp(tape, logits, t_val)
    return probs.data[:, NORMAL_CLASS].copy()


def anomaly_scores(state: ModelState, x: np.ndarray,
                   t: Optional[float] = None) -> np.ndarray:
    """Per-row anomaly score s = 1 - p_normal; higher means more anomalous."""
    return 1.0 - normal_confidence_values(state, x, t)


def predicted_labels(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Argmax class index per row; ties resolve to the normal class (0).

    Invariant to the temperature, which rescales but never reorders logits.
    """
    logits = _forward_logits(state, x)
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# checkpoint io (bit-exact round trip)


def save_checkpoint(state: ModelState, path, config_digest: str = "",
                    extra_arrays: Optional[dict[str, np.ndarray]] = None) -> None:
    """Flat binary checkpoint: JSON header + raw little-endian float64 buffers."""
    arrays: list[tuple[str, np.ndarray]] = [
        (name, state.params[name].data) for name in state.param_names()
    ]
    for name in sorted(extra_arrays or {}):
        arrays.append((f"extra.{name}", np.atleast_2d(
            np.asarray(extra_arrays[name], dtype=np.float64))))
    header = {
        "config": state.config.to_dict(),
        "seed": state.seed,
        "config_digest": config_digest,
        "arrays": [{"name": n, "rows": a.shape[0], "cols": a.shape[1]}
                   for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (state, extra arrays, raw header)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        config = ModelConfig.from_dict(header["config"])
        params: dict[str, ValueMatrix] = {}
        extra: dict[str, np.ndarray] = {}
        for meta in header["arrays"]:
            n = meta["rows"] * meta["cols"]
            buf = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(
                meta["rows"], meta["cols"])
            name = meta["name"]
            if name.startswith("extra."):
                extra[name[len("extra."):]] = buf.copy()
            else:
                params[name] = ValueMatrix(buf.copy())
    state = ModelState(config, params, header["seed"])
    missing = set(state.param_names()) - set(params)
    if missing:
        raise ConfigError(f"checkpoint missing parameters: {sorted(missing)}")
    return state, extra, header
