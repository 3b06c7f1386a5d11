"""
stmha_net.py - Socio-temporal multi-head attention LSTM encoder-decoder

Canonical layout is (batch, time, vehicle, feature). The encoder embeds the
scaled past positions, runs M stacked STMHA layers (social attention under
the interaction graph, positional encoding, causal temporal attention and a
feed-forward block) and a per-vehicle LSTM. The decoder rolls out F steps:
each step fuses the previous position with the LSTM state, passes the token
through one STMHA layer, steps an LSTM cell and adds a predicted offset to
the previous position.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from config import read_json, split_known
from constants import (
    D_FF,
    D_MODEL,
    D_NEAR_M,
    EMBED_INPUT_LIMIT,
    FUTURE_STEPS,
    Files,
    LSTM_HIDDEN,
    N_HEADS,
    PAST_STEPS,
    PE_HIDDEN,
    PE_INDEX_SCALE,
    SAMPLE_PERIOD_S,
    STMHA_LAYERS,
)
from exceptions import (
    ConfigurationError,
    ContractError,
    CorruptedWeightsError,
    DimensionError,
    InputError,
)
from tensor_core import Tensor
from track_assembly import ScaleSpec, WindowBatch, graph_from_positions

logger = logging.getLogger(__name__)

SCORE_SCALINGS = ("pre_softmax", "post_softmax")


@dataclass
class ModelConfig:
    d_model: int = D_MODEL
    n_heads: int = N_HEADS
    n_layers: int = STMHA_LAYERS
    d_ff: int = D_FF
    lstm_hidden: int = LSTM_HIDDEN
    pe_hidden: int = PE_HIDDEN
    t_steps: int = PAST_STEPS
    f_steps: int = FUTURE_STEPS
    d_near: float = D_NEAR_M
    dt: float = SAMPLE_PERIOD_S
    score_scaling: str = "pre_softmax"
    encoder_stmha: bool = True
    decoder_stmha: bool = True

    def __post_init__(self):
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.score_scaling not in SCORE_SCALINGS:
            raise ConfigurationError(
                f"score_scaling must be one of {SCORE_SCALINGS}, got {self.score_scaling!r}"
            )
        if min(self.d_model, self.d_ff, self.lstm_hidden, self.pe_hidden, self.t_steps, self.f_steps) <= 0:
            raise ConfigurationError("Model widths and step counts must be positive")
        if self.n_layers < 0:
            raise ConfigurationError(f"n_layers must be non-negative, got {self.n_layers}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**split_known(payload, known, "model"))


# ---------------------------------------------------------------- weights

def _stmha_layer_shapes(prefix: str, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, ff, pe = config.d_model, config.d_ff, config.pe_hidden
    shapes: Dict[str, Tuple[int, ...]] = {}
    for block in ("smha", "tmha"):
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{block}.{proj}"] = (d, d)
        shapes[f"{prefix}.{block}.bo"] = (d,)
        shapes[f"{prefix}.{block}.ln.gamma"] = (d,)
        shapes[f"{prefix}.{block}.ln.beta"] = (d,)
    shapes[f"{prefix}.pe.w1"] = (1, pe)
    shapes[f"{prefix}.pe.b1"] = (pe,)
    shapes[f"{prefix}.pe.w2"] = (pe, d)
    shapes[f"{prefix}.pe.b2"] = (d,)
    shapes[f"{prefix}.ffn.w1"] = (d, ff)
    shapes[f"{prefix}.ffn.b1"] = (ff,)
    shapes[f"{prefix}.ffn.w2"] = (ff, d)
    shapes[f"{prefix}.ffn.b2"] = (d,)
    shapes[f"{prefix}.ffn.ln.gamma"] = (d,)
    shapes[f"{prefix}.ffn.ln.beta"] = (d,)
    return shapes


def _lstm_shapes(prefix: str, d_in: int, hidden: int) -> Dict[str, Tuple[int, ...]]:
    return {
        f"{prefix}.wx": (d_in, 4 * hidden),
        f"{prefix}.wh": (hidden, 4 * hidden),
        f"{prefix}.b": (4 * hidden,),
    }


def weight_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every learnable tensor for a configuration."""
    d, h = config.d_model, config.lstm_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.w1": (2, d),
        "embed.b1": (d,),
        "embed.w2": (d, d),
        "embed.b2": (d,),
    }
    if config.encoder_stmha:
        for layer in range(config.n_layers):
            shapes.update(_stmha_layer_shapes(f"enc.{layer}", config))
    shapes.update(_lstm_shapes("enc.lstm", d, h))
    shapes["dec.embed.w"] = (2, d)
    shapes["dec.embed.b"] = (d,)
    shapes["dec.fuse.w"] = (d + h, d)
    shapes["dec.fuse.b"] = (d,)
    if config.decoder_stmha:
        shapes.update(_stmha_layer_shapes("dec.stmha", config))
    shapes.update(_lstm_shapes("dec.lstm", d, h))
    shapes["dec.head.w"] = (h, 2)
    shapes["dec.head.b"] = (2,)
    return shapes


class ModelWeights(Mapping):
    """Named Tensor collection; every tensor is a learnable leaf."""

    def __init__(self, tensors: Dict[str, Tensor]):
        self._tensors = dict(sorted(tensors.items()))

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError as e:
            raise CorruptedWeightsError(f"Weight {name!r} is missing") from e

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @classmethod
    def initialize(cls, shapes: Dict[str, Tuple[int, ...]], rng: np.random.Generator) -> "ModelWeights":
        """Matrices uniform in ±1/sqrt(fan_in); biases and betas 0; norm gains 1."""
        tensors: Dict[str, Tensor] = {}
        for name in sorted(shapes):
            shape = shapes[name]
            if name.endswith(".gamma"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(tensors)

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ModelWeights":
        return cls({name: Tensor(value, requires_grad=True) for name, value in arrays.items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self._tensors.items()}

    def zero_grad(self) -> None:
        tc.zero_grad(self._tensors.values())

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def check_shapes(self, expected: Dict[str, Tuple[int, ...]]) -> None:
        """
        Raises:
            CorruptedWeightsError: With an explicit diff of missing, unexpected and mis-shaped tensors.
        """
        problems: List[str] = []
        missing = sorted(set(expected) - set(self._tensors))
        unexpected = sorted(set(self._tensors) - set(expected))
        if missing:
            problems.append(f"missing {', '.join(missing)}")
        if unexpected:
            problems.append(f"unexpected {', '.join(unexpected)}")
        for name in sorted(set(expected) & set(self._tensors)):
            actual = tuple(self._tensors[name].shape)
            if actual != tuple(expected[name]):
                problems.append(f"{name}: expected {tuple(expected[name])}, got {actual}")
        if problems:
            raise CorruptedWeightsError("Weights do not match the model config: " + "; ".join(problems))

    def check_finite(self) -> None:
        bad = [name for name, t in self._tensors.items() if not np.all(np.isfinite(t.data))]
        if bad:
            raise CorruptedWeightsError(f"Non-finite values in weights: {', '.join(bad)}")

    def save(self, path: Path) -> None:
        tc.save_tensors(path, self._tensors)

    @classmethod
    def load(cls, path: Path) -> "ModelWeights":
        weights = cls(tc.load_tensors(path))
        weights.check_finite()
        return weights


# ---------------------------------------------------------------- attention

def masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray,
    score_scaling: str = "pre_softmax",
) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention with disallowed pairs at -inf.

    q (..., Lq, dk), k (..., Lk, dk), v (..., Lk, dv), mask broadcastable to
    (..., Lq, Lk). With "pre_softmax" the scores are divided by sqrt(dk);
    "post_softmax" divides the weights instead, so rows no longer sum to 1.

    Returns:
        (output (..., Lq, dv), weights (..., Lq, Lk))
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"Attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}",
            shapes=(q.shape, k.shape, v.shape),
        )
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = tc.matmul(q, tc.swapaxes(k, -1, -2))
    if score_scaling == "pre_softmax":
        weights = tc.masked_softmax(scores * scale, mask)
    else:
        weights = tc.masked_softmax(scores, mask) * scale
    return tc.matmul(weights, v), weights


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = x.shape
    return tc.swapaxes(x.reshape(tuple(lead) + (length, n_heads, d // n_heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = tc.swapaxes(x, -2, -3)
    *lead, length, heads, dk = x.shape
    return x.reshape(tuple(lead) + (length, heads * dk))


def multi_head(
    queries: Tensor,
    keys: Tensor,
    mask: np.ndarray,
    weights: Mapping,
    prefix: str,
    config: ModelConfig,
) -> Tensor:
    """Concat(A_1..A_h) W_o + b_o over the second-to-last axis."""
    q = _split_heads(queries @ weights[f"{prefix}.wq"], config.n_heads)
    k = _split_heads(keys @ weights[f"{prefix}.wk"], config.n_heads)
    v = _split_heads(keys @ weights[f"{prefix}.wv"], config.n_heads)
    head_mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    out, _ = masked_attention(q, k, v, head_mask, config.score_scaling)
    return _merge_heads(out) @ weights[f"{prefix}.wo"] + weights[f"{prefix}.bo"]


def _norm(x: Tensor, weights: Mapping, prefix: str) -> Tensor:
    return tc.layer_norm(x, weights[f"{prefix}.gamma"], weights[f"{prefix}.beta"])


# ---------------------------------------------------------------- layers

def embed(positions: Tensor, weights: Mapping, present: Optional[np.ndarray] = None) -> Tensor:
    """Shared per-(t, i) MLP lifting scaled (x, y) to d_model features."""
    positions = tc.as_tensor(positions)
    values = positions.data if present is None else positions.data[np.asarray(present, dtype=bool)]
    if values.size and np.max(np.abs(values)) > EMBED_INPUT_LIMIT:
        logger.warning(
            f"Embedding input outside [-{EMBED_INPUT_LIMIT}, {EMBED_INPUT_LIMIT}] "
            f"(max |value| {np.max(np.abs(values)):.2f}); are positions scaled?"
        )
    hidden = tc.relu(positions @ weights["embed.w1"] + weights["embed.b1"])
    return hidden @ weights["embed.w2"] + weights["embed.b2"]


def smha_layer(x: Tensor, graphs: np.ndarray, weights: Mapping, prefix: str, config: ModelConfig) -> Tensor:
    """
    Social attention across vehicles at each timestep.

    x (..., T, N, d); graphs (..., T, N, N) restricts vehicle i to its
    neighbours Γ_i. Output is Norm(x + MHA(x)).
    """
    graphs = np.asarray(graphs, dtype=bool)
    n = x.shape[-2]
    try:
        np.broadcast_shapes(graphs.shape[:-2], x.shape[:-2])
        aligned = graphs.shape[-2:] == (n, n)
    except ValueError:
        aligned = False
    if not aligned:
        raise DimensionError(
            f"Graph shape {graphs.shape} does not match features {x.shape}",
            shapes=(graphs.shape, x.shape),
        )
    attended = multi_head(x, x, graphs, weights, f"{prefix}.smha", config)
    return _norm(x + attended, weights, f"{prefix}.smha.ln")


def positional_encoding(h: Tensor, weights: Mapping, prefix: str, offset: int = 0) -> Tensor:
    """Add MLP(step index) to every step; h is (..., T, N, d) and step indices start at 1."""
    steps = h.shape[-3]
    index = Tensor(((offset + 1 + np.arange(steps, dtype=np.float64)) / PE_INDEX_SCALE).reshape(steps, 1))
    hidden = tc.relu(index @ weights[f"{prefix}.pe.w1"] + weights[f"{prefix}.pe.b1"])
    code = hidden @ weights[f"{prefix}.pe.w2"] + weights[f"{prefix}.pe.b2"]
    return h + code.reshape(steps, 1, code.shape[-1])


def causal_mask(present: np.ndarray) -> np.ndarray:
    """
    Temporal mask (..., N, T, T) from presence (..., T, N).

    Step t may attend to steps j <= t at which the vehicle is present; self is
    always allowed.
    """
    present = np.asarray(present, dtype=bool)
    steps = present.shape[-2]
    lower = np.tril(np.ones((steps, steps), dtype=bool))
    keys = np.expand_dims(np.swapaxes(present, -1, -2), -2)
    return (lower & keys) | np.eye(steps, dtype=bool)


def feed_forward(x: Tensor, weights: Mapping, prefix: str) -> Tensor:
    """Norm(x + W2 relu(W1 x))."""
    hidden = tc.relu(x @ weights[f"{prefix}.ffn.w1"] + weights[f"{prefix}.ffn.b1"])
    out = hidden @ weights[f"{prefix}.ffn.w2"] + weights[f"{prefix}.ffn.b2"]
    return _norm(x + out, weights, f"{prefix}.ffn.ln")


def tmha_layer(
    h: Tensor,
    weights: Mapping,
    prefix: str,
    config: ModelConfig,
    present: Optional[np.ndarray] = None,
    memory: Optional[Tensor] = None,
    memory_present: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Temporal attention per vehicle under a causal mask, then the FFN block.

    h is (..., T, N, d). With memory (..., Tm, N, d) every query step also
    attends to all present memory steps, which precede it in time.
    """
    if present is None:
        present = np.ones(h.shape[:-1], dtype=bool)
    mask = causal_mask(present)
    seq = tc.swapaxes(h, -2, -3)
    keys = seq
    if memory is not None:
        mem_steps = memory.shape[-3]
        if memory_present is None:
            memory_present = np.ones(memory.shape[:-1], dtype=bool)
        mem_keys = np.swapaxes(np.asarray(memory_present, dtype=bool), -1, -2)[..., None, :]
        mem_mask = np.broadcast_to(mem_keys, mask.shape[:-1] + (mem_steps,))
        mask = np.concatenate([mem_mask, mask], axis=-1)
        keys = tc.concat([tc.swapaxes(memory, -2, -3), seq], axis=-2)
    attended = multi_head(seq, keys, mask, weights, f"{prefix}.tmha", config)
    out = _norm(seq + attended, weights, f"{prefix}.tmha.ln")
    out = feed_forward(out, weights, prefix)
    return tc.swapaxes(out, -2, -3)


def stmha_layer(
    x: Tensor,
    graphs: np.ndarray,
    present: np.ndarray,
    weights: Mapping,
    prefix: str,
    config: ModelConfig,
    offset: int = 0,
    memory: Optional[Tensor] = None,
    memory_present: Optional[np.ndarray] = None,
) -> Tensor:
    """SMHA -> positional encoding -> TMHA + FFN."""
    social = smha_layer(x, graphs, weights, prefix, config)
    encoded = positional_encoding(social, weights, prefix, offset)
    return tmha_layer(encoded, weights, prefix, config, present, memory, memory_present)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weights: Mapping, prefix: str) -> Tuple[Tensor, Tensor]:
    """Standard 4-gate cell (input, forget, candidate, output); shared across vehicles."""
    hidden = h.shape[-1]
    gates = x @ weights[f"{prefix}.wx"] + h @ weights[f"{prefix}.wh"] + weights[f"{prefix}.b"]
    i = tc.sigmoid(gates[..., 0:hidden])
    f = tc.sigmoid(gates[..., hidden:2 * hidden])
    g = tc.tanh(gates[..., 2 * hidden:3 * hidden])
    o = tc.sigmoid(gates[..., 3 * hidden:4 * hidden])
    c_new = f * c + i * g
    return o * tc.tanh(c_new), c_new


# ---------------------------------------------------------------- encoder / decoder

@dataclass
class EncodedState:
    hidden: Tensor               # (B, N, lstm_hidden)
    cell: Tensor                 # (B, N, lstm_hidden)
    sequence: Tensor             # (B, T, N, d_model)
    present: np.ndarray          # (B, T, N)
    last_positions: np.ndarray   # (B, N, 2) scaled, last known per vehicle
    known: np.ndarray            # (B, N) vehicle seen at least once in the past


@dataclass
class DecodeResult:
    predictions: Tensor                                  # (B, F, N, 2) scaled
    teacher_flags: List[bool] = field(default_factory=list)


def _last_known(past: np.ndarray, present: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    steps = past.shape[-3]
    index = np.where(present, np.arange(steps)[:, None], -1).max(axis=-2)
    known = index >= 0
    picked = np.take_along_axis(past, np.maximum(index, 0)[..., None, :, None], axis=-3)[..., 0, :, :]
    return np.where(known[..., None], picked, 0.0), known


def encode(
    past: np.ndarray,
    present: np.ndarray,
    graphs: np.ndarray,
    weights: Mapping,
    config: ModelConfig,
) -> EncodedState:
    """
    embed -> [SMHA -> PE -> TMHA+FFN] x M -> LSTM over time.

    past (B, T, N, 2) scaled, present (B, T, N), graphs (B, T, N, N). The LSTM
    holds its state through steps at which a vehicle is absent.
    """
    past = np.asarray(past, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if past.shape[:-1] != present.shape or past.shape[-1] != 2:
        raise DimensionError(
            f"Past positions {past.shape} do not match presence {present.shape}",
            shapes=(past.shape, present.shape),
        )
    x = embed(Tensor(np.where(present[..., None], past, 0.0)), weights, present)
    if config.encoder_stmha:
        for layer in range(config.n_layers):
            x = stmha_layer(x, graphs, present, weights, f"enc.{layer}", config)

    lead = past.shape[:-3]
    steps, n = past.shape[-3], past.shape[-2]
    h = Tensor(np.zeros(lead + (n, config.lstm_hidden)))
    c = Tensor(np.zeros(lead + (n, config.lstm_hidden)))
    for t in range(steps):
        h_new, c_new = lstm_cell(x[..., t, :, :], h, c, weights, "enc.lstm")
        keep = present[..., t, :, None].astype(np.float64)
        h = h_new * keep + h * (1.0 - keep)
        c = c_new * keep + c * (1.0 - keep)

    last_positions, known = _last_known(past, present)
    return EncodedState(hidden=h, cell=c, sequence=x, present=present,
                        last_positions=last_positions, known=known)


def draw_teacher_flags(n_steps: int, tf_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Per-step coins: True feeds ground truth with probability tf_ratio."""
    if not 0.0 <= tf_ratio <= 1.0:
        raise ContractError(f"tf_ratio must be in [0, 1], got {tf_ratio}")
    return rng.random(n_steps) < tf_ratio


def decode(
    state: EncodedState,
    weights: Mapping,
    config: ModelConfig,
    scale: ScaleSpec,
    f_steps: Optional[int] = None,
    teacher: Optional[np.ndarray] = None,
    teacher_present: Optional[np.ndarray] = None,
    tf_ratio: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> DecodeResult:
    """
    Roll out f_steps predictions in scaled space.

    The social graph of each step is rebuilt from the latest positions
    (unscaled to metres). With teacher (B, F, N, 2) supplied, one coin per
    step decides whether the next input is ground truth (probability
    tf_ratio) or the model's own prediction; missing ground-truth entries
    fall back to the prediction.

    Raises:
        ContractError: If tf_ratio is outside [0, 1] or f_steps < 1.
    """
    if not 0.0 <= tf_ratio <= 1.0:
        raise ContractError(f"tf_ratio must be in [0, 1], got {tf_ratio}")
    f_steps = config.f_steps if f_steps is None else f_steps
    if f_steps < 1:
        raise ContractError(f"decode needs at least one step, got {f_steps}")
    coins = np.zeros(f_steps, dtype=bool)
    if teacher is not None:
        teacher = np.asarray(teacher, dtype=np.float64)
        if teacher.shape[-3] < f_steps:
            raise DimensionError(
                f"Teacher has {teacher.shape[-3]} steps, need {f_steps}",
                shapes=(teacher.shape,),
            )
        if teacher_present is None:
            teacher_present = np.ones(teacher.shape[:-1], dtype=bool)
        rng = rng if rng is not None else np.random.default_rng(0)
        coins = draw_teacher_flags(f_steps, tf_ratio, rng)

    t_steps = state.sequence.shape[-3]
    known = state.known
    prev = Tensor(state.last_positions)
    h, c = state.hidden, state.cell
    memory, memory_present = state.sequence, state.present
    outputs: List[Tensor] = []
    flags: List[bool] = []

    for k in range(f_steps):
        e = tc.relu(prev @ weights["dec.embed.w"] + weights["dec.embed.b"])
        token = tc.concat([e, h], axis=-1) @ weights["dec.fuse.w"] + weights["dec.fuse.b"]
        if config.decoder_stmha:
            lead = token.shape[:-2]
            z = token.reshape(lead + (1,) + token.shape[-2:])
            metres = scale.unscale(prev.data)
            graph = graph_from_positions(metres, known, config.d_near)[..., None, :, :]
            step_present = known[..., None, :]
            z = stmha_layer(z, graph, step_present, weights, "dec.stmha", config,
                            offset=t_steps + k, memory=memory, memory_present=memory_present)
            memory = tc.concat([memory, z], axis=-3)
            memory_present = np.concatenate([memory_present, step_present], axis=-2)
            token = z.reshape(token.shape)
        h, c = lstm_cell(token, h, c, weights, "dec.lstm")
        pred = prev + (h @ weights["dec.head.w"] + weights["dec.head.b"])
        outputs.append(pred)

        use_teacher = bool(coins[k])
        if teacher is not None:
            flags.append(use_teacher)
        if use_teacher:
            gt_mask = teacher_present[..., k, :, None].astype(np.float64)
            prev = pred * (1.0 - gt_mask) + Tensor(teacher[..., k, :, :] * gt_mask)
        else:
            prev = pred

    if flags:
        logger.debug(f"Teacher forcing audit: {''.join('T' if f else 'P' for f in flags)}")
    return DecodeResult(predictions=tc.stack(outputs, axis=-3), teacher_flags=flags)


# ---------------------------------------------------------------- model

class TrajectoryModel:
    """Config, weights and coordinate scale of a trained predictor."""

    def __init__(self, config: ModelConfig, weights: ModelWeights, scale: ScaleSpec):
        weights.check_shapes(weight_shapes(config))
        self.config = config
        self.weights = weights
        self.scale = scale

    @classmethod
    def create(cls, config: ModelConfig, scale: ScaleSpec, rng: np.random.Generator) -> "TrajectoryModel":
        return cls(config, ModelWeights.initialize(weight_shapes(config), rng), scale)

    def forward(
        self,
        batch: WindowBatch,
        tf_ratio: float = 0.0,
        rng: Optional[np.random.Generator] = None,
        use_teacher: bool = False,
    ) -> DecodeResult:
        """
        Scaled predictions (B, F, N, 2) for a batch of windows in metres.

        Windows without a future (prediction inputs) roll out config.f_steps.
        """
        past = self.scale.scale(batch.past)
        state = encode(past, batch.past_presence, batch.graphs, self.weights, self.config)
        teacher = self.scale.scale(batch.future) if use_teacher else None
        return decode(
            state,
            self.weights,
            self.config,
            self.scale,
            f_steps=batch.future.shape[1] or self.config.f_steps,
            teacher=teacher,
            teacher_present=batch.future_presence if use_teacher else None,
            tf_ratio=tf_ratio,
            rng=rng,
        )

    def predict(self, batch: WindowBatch) -> np.ndarray:
        """Closed-loop predictions in metres, (B, F, N, 2)."""
        with tc.no_grad():
            result = self.forward(batch)
        return self.scale.unscale(result.predictions.data)

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.weights.save(directory / Files.WEIGHTS)
        (directory / Files.MODEL_CONFIG).write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True))
        (directory / Files.SCALE).write_text(json.dumps(self.scale.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: Path) -> "TrajectoryModel":
        """
        Raises:
            InputError: If a model file is missing or unparsable.
            CorruptedWeightsError: If the weights do not fit the stored config.
        """
        directory = Path(directory)
        config = ModelConfig.from_dict(read_json(directory / Files.MODEL_CONFIG))
        scale = ScaleSpec.from_dict(read_json(directory / Files.SCALE))
        weights_path = directory / Files.WEIGHTS
        if not weights_path.exists():
            raise InputError(f"File not found: {weights_path}")
        return cls(config, ModelWeights.load(weights_path), scale)
