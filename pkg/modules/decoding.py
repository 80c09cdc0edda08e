"""Caption generation: greedy argmax, temperature sampling and beam search.

Decoders see the model only through a step function (see captioner.StepFn),
so they work the same on the transformer and on hand-built logit tables.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from modules.captioner import NEG_LARGE, FeaturesLike, StepFn, as_features, policy_log_probs_array
from modules.dtypes import BOS, EOS, FloatArray, TokenId, TokenSeq
from modules.exceptions import ConfigError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class DecodeConfig:
    """`max_len` counts generated tokens, EOS included."""

    max_len: int = 20
    temperature: float = 1.0
    beam_size: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            msg = f"beam_size must be at least 1, got {self.beam_size}"
            raise ConfigError(msg)
        if not self.temperature > 0:
            msg = f"temperature must be positive, got {self.temperature}"
            raise ConfigError(msg)
        if self.max_len < 1:
            msg = f"max_len must be at least 1, got {self.max_len}"
            raise ConfigError(msg)


def member_rng(seed: int, image_id: int, member: int, step: int = 0) -> np.random.Generator:
    """Independent stream per (run seed, image, group member, optimizer step)."""
    return np.random.default_rng([seed, image_id, member, step])


def draw_token(logits: FloatArray, temperature: float, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from softmax(logits / temperature) using one uniform."""
    scaled = logits / temperature
    weights = np.exp(scaled - scaled.max())
    cdf = np.cumsum(weights)
    index = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(index, len(logits) - 1)


def _single(features: FeaturesLike) -> FloatArray:
    feats = as_features(features)
    if feats.ndim != 2:
        msg = f"expected features of one image (R, F), got shape {feats.shape}"
        raise ShapeError(msg)
    return feats[None]


def _batch(features: FeaturesLike) -> FloatArray:
    feats = as_features(features)
    if feats.ndim != 3:
        msg = f"expected a batch of features (B, R, F), got shape {feats.shape}"
        raise ShapeError(msg)
    return feats


def greedy_decode(features: FeaturesLike, model: StepFn, cfg: DecodeConfig) -> TokenSeq:
    return greedy_decode_batch(_single(features), model, cfg)[0]


def greedy_decode_batch(features: FeaturesLike, model: StepFn, cfg: DecodeConfig) -> list[TokenSeq]:
    """Argmax at every step; ties go to the lowest token id."""
    feats = _batch(features)
    rows = [[BOS] for _ in range(feats.shape[0])]
    done = [False] * len(rows)
    for _ in range(cfg.max_len):
        live = [i for i, finished in enumerate(done) if not finished]
        if not live:
            break
        prefixes = np.array([rows[i] for i in live], dtype=np.int64)
        log_probs = policy_log_probs_array(model(prefixes, feats[live]))
        for row, i in enumerate(live):
            token = TokenId(int(np.argmax(log_probs[row])))
            rows[i].append(token)
            done[i] = token == EOS
    return [TokenSeq(tuple(ids)) for ids in rows]


@dataclass(frozen=True, slots=True)
class Sample:
    """A sampled caption with the temperature-1 log-prob of each generated token."""

    seq: TokenSeq
    log_probs: FloatArray

    @property
    def total_log_prob(self) -> float:
        return float(self.log_probs.sum())


def sample_decode(
    features: FeaturesLike,
    model: StepFn,
    cfg: DecodeConfig,
    rng: np.random.Generator,
) -> Sample:
    return sample_decode_batch(_single(features), model, cfg, [rng])[0]


def sample_decode_batch(
    features: FeaturesLike,
    model: StepFn,
    cfg: DecodeConfig,
    rngs: Sequence[np.random.Generator],
) -> list[Sample]:
    """Multinomial sampling, one rng per row; a row draws only while it is unfinished."""
    feats = _batch(features)
    if len(rngs) != feats.shape[0]:
        msg = f"sample_decode_batch: {len(rngs)} rngs for {feats.shape[0]} rows"
        raise ShapeError(msg)
    rows = [[BOS] for _ in rngs]
    scores: list[list[float]] = [[] for _ in rngs]
    done = [False] * len(rows)
    for _ in range(cfg.max_len):
        live = [i for i, finished in enumerate(done) if not finished]
        if not live:
            break
        prefixes = np.array([rows[i] for i in live], dtype=np.int64)
        raw = model(prefixes, feats[live])
        log_probs = policy_log_probs_array(raw)
        for row, i in enumerate(live):
            token = TokenId(draw_token(log_probs[row], cfg.temperature, rngs[i]))
            rows[i].append(token)
            scores[i].append(float(log_probs[row, token]))
            done[i] = token == EOS
    return [Sample(TokenSeq(tuple(ids)), np.array(lp)) for ids, lp in zip(rows, scores, strict=True)]


@dataclass(frozen=True, slots=True)
class _Hypothesis:
    score: float
    ids: tuple[TokenId, ...]


def beam_decode(features: FeaturesLike, model: StepFn, cfg: DecodeConfig) -> TokenSeq:
    """Sum-of-log-prob beam search without length normalisation.

    Each step keeps the `beam_size` best extensions of all live hypotheses,
    ordered by (score desc, parent rank, token id). Extensions ending in EOS
    are retired. The search stops once the best retired score is at least
    the best live score, since extending never raises a score.
    """
    feats = _single(features)
    beams = [_Hypothesis(0.0, (BOS,))]
    completed: list[_Hypothesis] = []
    for _ in range(cfg.max_len):
        prefixes = np.array([h.ids for h in beams], dtype=np.int64)
        log_probs = policy_log_probs_array(model(prefixes, np.repeat(feats, len(beams), axis=0)))
        candidates: list[tuple[float, int, int]] = []
        for rank, hyp in enumerate(beams):
            for token in np.flatnonzero(log_probs[rank] > NEG_LARGE / 2):
                candidates.append((hyp.score + float(log_probs[rank, token]), rank, int(token)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        survivors: list[_Hypothesis] = []
        for score, rank, token in candidates[: cfg.beam_size]:
            hyp = _Hypothesis(score, (*beams[rank].ids, TokenId(token)))
            (completed if token == EOS else survivors).append(hyp)
        beams = survivors
        if not beams:
            break
        if completed and max(h.score for h in completed) >= beams[0].score:
            break
    pool = completed or beams
    best = min(pool, key=lambda h: (-h.score, h.ids))
    log.debug("Beam search kept %d finished hypotheses; best score %.4f.", len(completed), best.score)
    return TokenSeq(best.ids)
