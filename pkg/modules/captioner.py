"""Transformer caption decoder over precomputed region features.

Pipeline per layer: word + learned position embeddings with LayerNorm, causal
masked multi-head self-attention with Add&Norm, multi-head cross-attention
over the image regions with Add&Norm, then a ReLU FFN with Add&Norm. A linear
predictor maps the final hidden states to vocabulary logits.

Every entry point accepts a single sequence (T,) with features (R, F) or a
batch (B, T) with features (B, R, F).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Final

import numpy as np

from modules import autograd as ag
from modules.autograd import Tensor
from modules.dtypes import BOS, PAD, FeatureGrid, FloatArray, IntArray, TokenSeq
from modules.exceptions import ConfigError, ShapeError
from modules.params import ModelParams

log = logging.getLogger(__name__)

# Additive mask value. Finite so that 0 * mask stays 0 in backward;
# exp(-1e9) underflows to exactly 0.0 in float64.
NEG_LARGE: Final = -1e9
INIT_STD: Final = 0.02

type TokensLike = TokenSeq | Sequence[int] | IntArray
type FeaturesLike = FeatureGrid | FloatArray
# (prefix ids (k, t), features (k, R, F)) -> next-token logits (k, V)
type StepFn = Callable[[IntArray, FloatArray], FloatArray]


@dataclass(frozen=True, slots=True)
class DecoderConfig:
    vocab_size: int
    feat_dim: int = 2048
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 1
    ffn_dim: int = 2048
    max_len: int = 20

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            msg = f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            raise ConfigError(msg)
        if self.max_len < 2:
            msg = f"max_len must be at least 2, got {self.max_len}"
            raise ConfigError(msg)
        if self.vocab_size < 3 or self.n_layers < 1 or self.feat_dim < 1 or self.ffn_dim < 1:
            msg = f"invalid decoder sizes: {self}"
            raise ConfigError(msg)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True, slots=True)
class CausalMask:
    """Additive mask: 0 where key j <= query i, NEG_LARGE for future keys."""

    size: int
    matrix: FloatArray


def causal_mask(size: int) -> CausalMask:
    return CausalMask(size, np.triu(np.full((size, size), NEG_LARGE), k=1))


def init_params(cfg: DecoderConfig, rng: np.random.Generator) -> ModelParams:
    """BERT-style init: weights N(0, 0.02^2), biases 0, LayerNorm gain 1."""
    params = ModelParams()
    d = cfg.d_model

    def weight(name: str, rows: int, cols: int) -> None:
        params.add(name, rng.normal(0.0, INIT_STD, size=(rows, cols)))

    def linear(prefix: str, rows: int, cols: int) -> None:
        weight(f"{prefix}.w", rows, cols)
        params.add(f"{prefix}.b", np.zeros(cols))

    def norm(prefix: str) -> None:
        params.add(f"{prefix}.gain", np.ones(d))
        params.add(f"{prefix}.bias", np.zeros(d))

    weight("embed.word", cfg.vocab_size, d)
    weight("embed.pos", cfg.max_len, d)
    norm("embed.ln")
    for layer in range(cfg.n_layers):
        base = f"layer{layer}"
        for proj in ("q", "k", "v", "out"):
            linear(f"{base}.self.{proj}", d, d)
        norm(f"{base}.self.ln")
        linear(f"{base}.cross.q", d, d)
        linear(f"{base}.cross.k", cfg.feat_dim, d)
        linear(f"{base}.cross.v", cfg.feat_dim, d)
        linear(f"{base}.cross.out", d, d)
        norm(f"{base}.cross.ln")
        linear(f"{base}.ffn.in", d, cfg.ffn_dim)
        linear(f"{base}.ffn.out", cfg.ffn_dim, d)
        norm(f"{base}.ffn.ln")
    linear("predictor", d, cfg.vocab_size)
    log.debug("Initialised %d parameters (%d values).", len(params), params.count())
    return params


def as_ids(tokens: TokensLike) -> IntArray:
    if isinstance(tokens, TokenSeq):
        return np.asarray(tokens.ids, dtype=np.int64)
    return np.asarray(tokens, dtype=np.int64)


def as_features(features: FeaturesLike) -> FloatArray:
    if isinstance(features, FeatureGrid):
        return features.values
    return np.asarray(features, dtype=np.float64)


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ag.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def _norm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ag.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _head_perm(ndim: int) -> list[int]:
    # (..., T, H, dk) <-> (..., H, T, dk)
    perm = list(range(ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return perm


def _split_heads(x: Tensor, cfg: DecoderConfig) -> Tensor:
    shaped = ag.reshape(x, (*x.shape[:-1], cfg.n_heads, cfg.head_dim))
    return ag.transpose(shaped, _head_perm(shaped.ndim))


def _merge_heads(x: Tensor, cfg: DecoderConfig) -> Tensor:
    swapped = ag.transpose(x, _head_perm(x.ndim))
    return ag.reshape(swapped, (*swapped.shape[:-2], cfg.d_model))


def _multi_head(
    queries: Tensor,
    keys_values: Tensor,
    params: ModelParams,
    prefix: str,
    cfg: DecoderConfig,
    mask: FloatArray | None,
) -> tuple[Tensor, Tensor]:
    q = _split_heads(_linear(queries, params, f"{prefix}.q"), cfg)
    k = _split_heads(_linear(keys_values, params, f"{prefix}.k"), cfg)
    v = _split_heads(_linear(keys_values, params, f"{prefix}.v"), cfg)
    scores = ag.matmul(q, ag.transpose(k)) * (1.0 / math.sqrt(cfg.head_dim))
    if mask is not None:
        scores = scores + ag.constant(mask)
    weights = ag.softmax(scores)
    context = _merge_heads(ag.matmul(weights, v), cfg)
    return _linear(context, params, f"{prefix}.out"), weights


def embed(tokens: TokensLike, params: ModelParams, cfg: DecoderConfig) -> Tensor:
    """LayerNorm(word embedding + position embedding)."""
    ids = as_ids(tokens)
    length = ids.shape[-1]
    if length > cfg.max_len:
        msg = f"embed: sequence length {length} exceeds max_len {cfg.max_len}"
        raise ShapeError(msg)
    words = ag.embedding_gather(params["embed.word"], ids)
    positions = ag.embedding_gather(params["embed.pos"], np.arange(length))
    return _norm(words + positions, params, "embed.ln")


def _check_mask(e: Tensor, mask: CausalMask) -> None:
    if mask.size != e.shape[-2]:
        msg = f"masked_self_attention: mask size {mask.size} != sequence length {e.shape[-2]}"
        raise ShapeError(msg)


def masked_self_attention(e: Tensor, mask: CausalMask, params: ModelParams, cfg: DecoderConfig, layer: int = 0) -> Tensor:
    """H_e = LayerNorm(e + MaskedMHA(e, M))."""
    _check_mask(e, mask)
    attended, _ = _multi_head(e, e, params, f"layer{layer}.self", cfg, mask.matrix)
    return _norm(e + attended, params, f"layer{layer}.self.ln")


def self_attention_weights(
    e: Tensor,
    mask: CausalMask,
    params: ModelParams,
    cfg: DecoderConfig,
    layer: int = 0,
) -> FloatArray:
    """Per-head attention weights (..., H, T, T) of the masked self-attention."""
    _check_mask(e, mask)
    with ag.paused():
        _, weights = _multi_head(e, e, params, f"layer{layer}.self", cfg, mask.matrix)
    return weights.data


def _feature_tensor(h_e: Tensor, features: FeaturesLike, cfg: DecoderConfig) -> Tensor:
    feats = as_features(features)
    if feats.shape[-1] != cfg.feat_dim:
        msg = f"cross_attend_ffn: feature dim {feats.shape[-1]} != configured feat_dim {cfg.feat_dim}"
        raise ShapeError(msg)
    if feats.ndim != h_e.ndim:
        msg = f"cross_attend_ffn: features {feats.shape} do not pair with hidden states {h_e.shape}"
        raise ShapeError(msg)
    return ag.constant(feats)


def cross_attend_ffn(h_e: Tensor, features: FeaturesLike, params: ModelParams, cfg: DecoderConfig, layer: int = 0) -> Tensor:
    """H' = LayerNorm(H_e + MHA(H_e, I_e)); H = LayerNorm(H' + FFN(H'))."""
    image = _feature_tensor(h_e, features, cfg)
    base = f"layer{layer}"
    attended, _ = _multi_head(h_e, image, params, f"{base}.cross", cfg, None)
    fused = _norm(h_e + attended, params, f"{base}.cross.ln")
    hidden = _linear(ag.relu(_linear(fused, params, f"{base}.ffn.in")), params, f"{base}.ffn.out")
    return _norm(fused + hidden, params, f"{base}.ffn.ln")


def cross_attention_weights(
    h_e: Tensor,
    features: FeaturesLike,
    params: ModelParams,
    cfg: DecoderConfig,
    layer: int = 0,
) -> FloatArray:
    image = _feature_tensor(h_e, features, cfg)
    with ag.paused():
        _, weights = _multi_head(h_e, image, params, f"layer{layer}.cross", cfg, None)
    return weights.data


def logits(tokens: TokensLike, features: FeaturesLike, params: ModelParams, cfg: DecoderConfig) -> Tensor:
    """Row t holds the next-token logits given tokens <= t and the image."""
    hidden = embed(tokens, params, cfg)
    mask = causal_mask(hidden.shape[-2])
    for layer in range(cfg.n_layers):
        hidden = masked_self_attention(hidden, mask, params, cfg, layer)
        hidden = cross_attend_ffn(hidden, features, params, cfg, layer)
    return _linear(hidden, params, "predictor")


# Policy view of the model: PAD and BOS are never emitted, so the sampling and
# RL log-probabilities exclude them. Cross-entropy training uses raw logits.


def banned_bias(vocab_size: int) -> FloatArray:
    bias = np.zeros(vocab_size)
    bias[[PAD, BOS]] = NEG_LARGE
    return bias


def policy_log_probs_array(raw_logits: FloatArray) -> FloatArray:
    return ag.log_softmax_array(raw_logits + banned_bias(raw_logits.shape[-1]))


def policy_log_probs(raw_logits: Tensor) -> Tensor:
    return ag.log_softmax(raw_logits + ag.constant(banned_bias(raw_logits.shape[-1])))


@dataclass(frozen=True, slots=True)
class TeacherForced:
    """Inputs/targets for scoring sequences; mask marks real target positions."""

    inputs: IntArray
    targets: IntArray
    mask: FloatArray


def teacher_forced(sequences: Sequence[TokenSeq]) -> TeacherForced:
    width = max(len(seq) - 1 for seq in sequences)
    if width < 1:
        msg = "teacher_forced: every sequence needs at least BOS and one more token"
        raise ShapeError(msg)
    inputs = np.full((len(sequences), width), PAD, dtype=np.int64)
    targets = np.full((len(sequences), width), PAD, dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids = np.asarray(seq.ids, dtype=np.int64)
        inputs[row, : len(ids) - 1] = ids[:-1]
        targets[row, : len(ids) - 1] = ids[1:]
    return TeacherForced(inputs, targets, (targets != PAD).astype(np.float64))


def token_log_probs(
    sequences: Sequence[TokenSeq],
    features: FloatArray,
    params: ModelParams,
    cfg: DecoderConfig,
) -> tuple[Tensor, FloatArray]:
    """Per-token policy log-probs (N, T) of `sequences`, zeroed past each sequence end."""
    batch = teacher_forced(sequences)
    log_probs = policy_log_probs(logits(batch.inputs, features, params, cfg))
    picked = ag.take_last(log_probs, batch.targets)
    return picked * ag.constant(batch.mask), batch.mask


def sequence_log_prob(seq: TokenSeq, features: FeaturesLike, params: ModelParams, cfg: DecoderConfig) -> float:
    """log p_theta(x_{1:T} | image) under the policy distribution."""
    feats = as_features(features)[None]
    with ag.paused():
        per_token, _ = token_log_probs([seq], feats, params, cfg)
    return float(per_token.data.sum())


def step_fn(params: ModelParams, cfg: DecoderConfig) -> StepFn:
    """Adapter used by the decoders: raw next-token logits for each prefix."""

    def _step(prefixes: IntArray, features: FloatArray) -> FloatArray:
        with ag.paused():
            return logits(prefixes, features, params, cfg).data[:, -1, :]

    return _step
