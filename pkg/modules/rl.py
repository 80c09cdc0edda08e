"""Training steps: cross-entropy, self-critical sequence training and GRPO."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Final

import numpy as np

from modules import autograd as ag
from modules.autograd import Tensor
from modules.captioner import DecoderConfig, logits, step_fn, teacher_forced, token_log_probs
from modules.decoding import DecodeConfig, Sample, greedy_decode_batch, member_rng, sample_decode_batch
from modules.dtypes import PAD, FloatArray, ImageId, TokenSeq
from modules.enums import PolicyRole, RatioAgg, UpdateMode
from modules.exceptions import ConfigError, DataError, NumericError, RewardError, ShapeError
from modules.optim import AdamState, adam_step
from modules.params import ModelParams

log = logging.getLogger(__name__)

ADVANTAGE_STD_FLOOR: Final = 1e-8
MAX_LOG_RATIO: Final = 50.0

type RewardFn = Callable[[ImageId, TokenSeq], float]


@dataclass(frozen=True, slots=True)
class CaptionBatch:
    """Images with their region features (B, R, F) and one encoded caption each."""

    image_ids: tuple[ImageId, ...]
    features: FloatArray
    captions: tuple[TokenSeq, ...]

    def __post_init__(self) -> None:
        if not (len(self.image_ids) == self.features.shape[0] == len(self.captions)):
            msg = "CaptionBatch: image ids, features and captions differ in length"
            raise ShapeError(msg)

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True, slots=True)
class PolicySnapshot:
    """Frozen copy of the parameters for pi_old or pi_ref."""

    params: ModelParams
    role: PolicyRole


def snapshot(params: ModelParams, role: PolicyRole) -> PolicySnapshot:
    return PolicySnapshot(params.clone(requires_grad=False), role)


@dataclass(slots=True)
class TrainState:
    params: ModelParams
    optimizer: AdamState
    old: PolicySnapshot | None = None
    reference: PolicySnapshot | None = None

    @property
    def step(self) -> int:
        return self.optimizer.step


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        msg = f"{name} became {value}"
        raise NumericError(msg)


def _apply(state: TrainState, loss: Tensor, tape_size: int, grads: ag.GradMap, lr: float) -> None:
    _check_finite("loss", loss.item())
    for name, tensor in state.params.items():
        grad = grads.get(tensor)
        if grad is not None and not np.all(np.isfinite(grad)):
            msg = f"gradient of '{name}' contains NaN/Inf"
            raise NumericError(msg)
    log.debug("Optimizer step %d over %d recorded ops (lr=%.3g).", state.step + 1, tape_size, lr)
    adam_step(state.params, grads, state.optimizer, lr)


def _differentiate(loss_fn: Callable[[], Tensor]) -> tuple[Tensor, ag.GradMap, int]:
    with ag.recording() as tape:
        loss = loss_fn()
    return loss, ag.backward(loss), len(tape)


# ---------------------------------------------------------------- cross-entropy


def ce_loss(batch: CaptionBatch, params: ModelParams, cfg: DecoderConfig) -> Tensor:
    """Mean teacher-forced cross-entropy over non-PAD target positions."""
    forced = teacher_forced(batch.captions)
    return ag.cross_entropy(logits(forced.inputs, batch.features, params, cfg), forced.targets, ignore_index=PAD)


def ce_step(batch: CaptionBatch, state: TrainState, cfg: DecoderConfig, lr: float) -> float:
    if not len(batch):
        msg = "ce_step received an empty batch"
        raise DataError(msg)
    loss, grads, size = _differentiate(lambda: ce_loss(batch, state.params, cfg))
    _apply(state, loss, size, grads, lr)
    return loss.item()


# ---------------------------------------------------------------- SCST


@dataclass(frozen=True, slots=True)
class ScstConfig:
    epochs: int = 20
    lr: float = 1e-5

    def __post_init__(self) -> None:
        if self.epochs < 1:
            msg = f"SCST epochs must be at least 1, got {self.epochs}"
            raise ConfigError(msg)


@dataclass(frozen=True, slots=True)
class ScstStats:
    loss: float
    mean_reward: float
    mean_baseline: float
    mean_advantage: float


def score_rewards(reward_fn: RewardFn, image_ids: Sequence[ImageId], captions: Sequence[TokenSeq]) -> FloatArray:
    rewards = np.empty(len(captions))
    for i, (image_id, caption) in enumerate(zip(image_ids, captions, strict=True)):
        try:
            rewards[i] = reward_fn(image_id, caption)
        except Exception as e:
            msg = f"reward function failed on image {image_id}: {e}"
            raise RewardError(msg) from e
        if not math.isfinite(rewards[i]):
            msg = f"reward for image {image_id} is {rewards[i]}"
            raise RewardError(msg)
    return rewards


def scst_surrogate(
    samples: Sequence[TokenSeq],
    advantages: FloatArray,
    features: FloatArray,
    params: ModelParams,
    cfg: DecoderConfig,
) -> Tensor:
    """-mean_i((r(x_s) - r(x_hat)) * log p(x_s)); its gradient is the self-critical policy gradient."""
    per_token, _ = token_log_probs(samples, features, params, cfg)
    sequence_log_probs = ag.sum_(per_token, axis=1)
    return -ag.mean(sequence_log_probs * ag.constant(advantages))


def scst_step(
    batch: CaptionBatch,
    state: TrainState,
    cfg: DecoderConfig,
    decode: DecodeConfig,
    reward_fn: RewardFn,
    lr: float,
) -> ScstStats:
    """One self-critical update; the greedy baseline is decoded from the current policy before the step."""
    if not len(batch):
        msg = "scst_step received an empty batch"
        raise DataError(msg)
    model = step_fn(state.params, cfg)
    baseline = greedy_decode_batch(batch.features, model, decode)
    rngs = [member_rng(decode.seed, image_id, 0, state.step) for image_id in batch.image_ids]
    samples = [s.seq for s in sample_decode_batch(batch.features, model, decode, rngs)]
    sample_rewards = score_rewards(reward_fn, batch.image_ids, samples)
    baseline_rewards = score_rewards(reward_fn, batch.image_ids, baseline)
    advantages = sample_rewards - baseline_rewards

    keep = [i for i, s in enumerate(samples) if s.words]
    if len(keep) < len(samples):
        log.warning("Dropping %d zero-length samples from the SCST batch.", len(samples) - len(keep))
    if not keep:
        return ScstStats(0.0, float(sample_rewards.mean()), float(baseline_rewards.mean()), float(advantages.mean()))
    kept_adv = np.zeros(len(samples))
    kept_adv[keep] = advantages[keep]

    loss, grads, size = _differentiate(
        lambda: scst_surrogate(samples, kept_adv, batch.features, state.params, cfg),
    )
    _apply(state, loss, size, grads, lr)
    return ScstStats(
        loss=loss.item(),
        mean_reward=float(sample_rewards.mean()),
        mean_baseline=float(baseline_rewards.mean()),
        mean_advantage=float(advantages.mean()),
    )


# ---------------------------------------------------------------- GRPO


@dataclass(frozen=True, slots=True)
class GrpoConfig:
    group_size: int = 5
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    update_steps: int = 20
    epochs: int = 5
    lr: float = 1e-5
    ratio_agg: RatioAgg = RatioAgg.TOKEN_MEAN
    update_mode: UpdateMode = UpdateMode.SYNC

    def __post_init__(self) -> None:
        if self.group_size < 2:
            msg = f"group_size must be at least 2, got {self.group_size}"
            raise ConfigError(msg)
        if not 0 < self.clip_eps < 1:
            msg = f"clip_eps must lie in (0, 1), got {self.clip_eps}"
            raise ConfigError(msg)
        if self.kl_beta < 0:
            msg = f"kl_beta must be non-negative, got {self.kl_beta}"
            raise ConfigError(msg)
        if self.update_steps < 1 or self.epochs < 1:
            msg = "update_steps and epochs must be at least 1"
            raise ConfigError(msg)


@dataclass(frozen=True, slots=True)
class GroupMember:
    seq: TokenSeq
    old_log_probs: FloatArray  # per generated token, under pi_old
    reward: float
    advantage: float


@dataclass(frozen=True, slots=True)
class SampleGroup:
    image_id: ImageId
    features: FloatArray
    members: tuple[GroupMember, ...]

    @property
    def sequences(self) -> list[TokenSeq]:
        return [m.seq for m in self.members]

    @property
    def rewards(self) -> FloatArray:
        return np.array([m.reward for m in self.members])

    @property
    def advantages(self) -> FloatArray:
        return np.array([m.advantage for m in self.members])


def group_advantages(rewards: Sequence[float] | FloatArray) -> FloatArray:
    """(r - mean) / population std; all zeros when the rewards are (nearly) constant."""
    values = np.asarray(rewards, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        msg = f"group_advantages needs at least 2 rewards, got {values.size}"
        raise ShapeError(msg)
    std = values.std()
    if std < ADVANTAGE_STD_FLOOR:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def kl_estimator(logp_theta: float, logp_ref: float) -> float:
    """rho - log(rho) - 1 with rho = pi_ref / pi_theta; non-negative, zero iff equal."""
    log_ratio = min(logp_ref - logp_theta, MAX_LOG_RATIO)
    return math.exp(log_ratio) - log_ratio - 1.0


def kl_penalty(logp_theta: Tensor, logp_ref: FloatArray) -> Tensor:
    """Elementwise kl_estimator, differentiable in logp_theta."""
    log_ratio = ag.clip(ag.constant(logp_ref) - logp_theta, -np.inf, MAX_LOG_RATIO)
    return ag.exp(log_ratio) - log_ratio - 1.0


def make_group(image_id: ImageId, features: FloatArray, samples: Sequence[Sample], rewards: FloatArray) -> SampleGroup:
    advantages = group_advantages(rewards)
    members = tuple(
        GroupMember(s.seq, s.log_probs, float(r), float(a)) for s, r, a in zip(samples, rewards, advantages, strict=True)
    )
    return SampleGroup(image_id, features, members)


@dataclass(frozen=True, slots=True)
class GrpoTerms:
    mean_kl: float
    clip_fraction: float


def _padded(rows: Sequence[FloatArray], width: int) -> FloatArray:
    out = np.zeros((len(rows), width))
    for i, row in enumerate(rows):
        out[i, : len(row)] = row
    return out


def grpo_loss(
    group: SampleGroup,
    params: ModelParams,
    ref: PolicySnapshot,
    cfg: GrpoConfig,
    model_cfg: DecoderConfig,
) -> tuple[Tensor, GrpoTerms]:
    """-(1/G) sum_i [min(rho_i A_i, clip(rho_i) A_i) - beta KL_i] for one group."""
    if not group.members:
        msg = f"grpo_loss: empty group for image {group.image_id}"
        raise DataError(msg)
    sequences = group.sequences
    features = np.repeat(group.features[None], len(sequences), axis=0)
    logp_theta, mask = token_log_probs(sequences, features, params, model_cfg)
    with ag.paused():
        logp_ref = token_log_probs(sequences, features, ref.params, model_cfg)[0].data
    logp_old = _padded([m.old_log_probs for m in group.members], mask.shape[1])
    lengths = np.maximum(mask.sum(axis=1), 1.0)

    log_ratio = ag.sum_(logp_theta - ag.constant(logp_old), axis=1)
    if cfg.ratio_agg is RatioAgg.TOKEN_MEAN:
        log_ratio = log_ratio / ag.constant(lengths)
    ratio = ag.exp(log_ratio)
    advantages = ag.constant(group.advantages)
    surrogate = ag.minimum(
        ratio * advantages,
        ag.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages,
    )
    kl = ag.sum_(kl_penalty(logp_theta, logp_ref) * ag.constant(mask), axis=1) / ag.constant(lengths)
    loss = -ag.mean(surrogate - kl * cfg.kl_beta)
    terms = GrpoTerms(
        mean_kl=float(kl.data.mean()),
        clip_fraction=float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_eps)),
    )
    return loss, terms


@dataclass(frozen=True, slots=True)
class GrpoStats:
    loss: float
    mean_reward: float
    mean_abs_advantage: float
    mean_kl: float
    clip_fraction: float


def sample_groups(
    batch: CaptionBatch,
    state: TrainState,
    cfg: GrpoConfig,
    model_cfg: DecoderConfig,
    decode: DecodeConfig,
    reward_fn: RewardFn,
) -> list[SampleGroup]:
    """Draw G captions per image from pi_old and attach rewards and advantages."""
    if state.old is None:
        msg = "GRPO needs a pi_old snapshot before sampling"
        raise ConfigError(msg)
    model = step_fn(state.old.params, model_cfg)
    groups: list[SampleGroup] = []
    for image_id, feats in zip(batch.image_ids, batch.features, strict=True):
        rngs = [member_rng(decode.seed, image_id, member, state.step) for member in range(cfg.group_size)]
        stacked = np.repeat(feats[None], cfg.group_size, axis=0)
        samples = sample_decode_batch(stacked, model, decode, rngs)
        rewards = score_rewards(reward_fn, [image_id] * cfg.group_size, [s.seq for s in samples])
        groups.append(make_group(image_id, feats, samples, rewards))
    return groups


def _grpo_update(
    groups: Sequence[SampleGroup],
    state: TrainState,
    cfg: GrpoConfig,
    model_cfg: DecoderConfig,
    lr: float,
) -> tuple[float, list[GrpoTerms]]:
    reference = state.reference
    if reference is None:
        msg = "GRPO needs a frozen reference policy"
        raise ConfigError(msg)
    collected: list[GrpoTerms] = []

    def _loss() -> Tensor:
        losses: list[Tensor] = []
        for group in groups:
            loss, terms = grpo_loss(group, state.params, reference, cfg, model_cfg)
            losses.append(loss)
            collected.append(terms)
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        return total * (1.0 / len(losses))

    loss, grads, size = _differentiate(_loss)
    _apply(state, loss, size, grads, lr)
    return loss.item(), collected


def grpo_step(
    batch: CaptionBatch,
    state: TrainState,
    cfg: GrpoConfig,
    model_cfg: DecoderConfig,
    decode: DecodeConfig,
    reward_fn: RewardFn,
    lr: float | Callable[[int], float],
) -> GrpoStats:
    """Sample groups under pi_old, then update pi_theta.

    SYNC mode takes one optimizer step and refreshes pi_old every
    `update_steps` steps. INNER mode takes `update_steps` optimizer steps on
    the same groups and refreshes pi_old afterwards. `lr` may be a function of
    the optimizer step count.
    """
    if not len(batch):
        msg = "grpo_step received an empty batch"
        raise DataError(msg)
    groups = sample_groups(batch, state, cfg, model_cfg, decode, reward_fn)
    schedule = lr if callable(lr) else (lambda _step: lr)
    inner = cfg.update_steps if cfg.update_mode is UpdateMode.INNER else 1
    losses: list[float] = []
    terms: list[GrpoTerms] = []
    for _ in range(inner):
        loss, step_terms = _grpo_update(groups, state, cfg, model_cfg, schedule(state.step))
        losses.append(loss)
        terms.extend(step_terms)
    if cfg.update_mode is UpdateMode.INNER or state.step % cfg.update_steps == 0:
        state.old = snapshot(state.params, PolicyRole.OLD)
        log.debug("Synchronised pi_old at optimizer step %d.", state.step)
    rewards = np.concatenate([g.rewards for g in groups])
    advantages = np.concatenate([g.advantages for g in groups])
    return GrpoStats(
        loss=float(np.mean(losses)),
        mean_reward=float(rewards.mean()),
        mean_abs_advantage=float(np.abs(advantages).mean()),
        mean_kl=float(np.mean([t.mean_kl for t in terms])),
        clip_fraction=float(np.mean([t.clip_fraction for t in terms])),
    )


def start_rl(params: ModelParams, optimizer: AdamState | None = None) -> TrainState:
    """RL stage state: pi_ref frozen at the incoming checkpoint, pi_old synced to it."""
    return TrainState(
        params=params,
        optimizer=optimizer or AdamState.for_params(params),
        old=snapshot(params, PolicyRole.OLD),
        reference=snapshot(params, PolicyRole.REFERENCE),
    )


@dataclass(slots=True)
class StabilityTracker:
    """Running maximum of a validation metric and the worst relative drop below it."""

    collapse_threshold: float = 0.2
    best: float = -math.inf
    max_relative_drop: float = 0.0
    history: list[float] = field(default_factory=list)

    def update(self, value: float) -> bool:
        """Record a reading; True when it falls more than the threshold below the best so far."""
        self.history.append(value)
        if value > self.best:
            self.best = value
            return False
        if self.best <= 0:
            return False
        drop = (self.best - value) / self.best
        self.max_relative_drop = max(self.max_relative_drop, drop)
        if drop > self.collapse_threshold:
            log.warning("Validation score %.3f is %.0f%% below the best %.3f.", value, 100 * drop, self.best)
            return True
        return False
