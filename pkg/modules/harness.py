"""Run orchestration: data generation, CE pretraining, SCST/GRPO fine-tuning, evaluation.

Each training or evaluation run owns a directory:

    config.json  version.txt  log.jsonl  checkpoints/epoch_XX.sqrl
    final.sqrl  best.sqrl  report.json  report.csv  summary.json  timing.json

Wall-clock figures live only in log.jsonl (wall_ms) and timing.json, so every
other file is reproducible byte for byte from the same config and data.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Final

import numpy as np

from modules import curves
from modules.captioner import DecoderConfig, init_params, step_fn
from modules.checkpoint import load_checkpoint, save_checkpoint
from modules.config import RunConfig
from modules.datasets import Dataset, dump_json, generate_dataset, load_dataset, load_json
from modules.decoding import DecodeConfig, beam_decode
from modules.dtypes import BOS, EOS, SPECIAL_TOKENS, ImageId, SplitName, TokenId, TokenSeq
from modules.enums import MetricName, Stage, UpdateMode
from modules.exceptions import ConfigError, DataError
from modules.features import FeatureDirectory, stack_features
from modules.metrics import (
    CiderScorer,
    DiversityReport,
    MetricReport,
    Words,
    score_corpus,
    score_diversity,
    tokenize,
)
from modules.optim import AdamState, lr_schedule
from modules.params import ModelParams
from modules.rl import (
    CaptionBatch,
    RewardFn,
    StabilityTracker,
    TrainState,
    ce_step,
    grpo_step,
    scst_step,
    start_rl,
)
from modules.TrainingLog import StepRecord, TrainingLog
from modules.utils import derive_rng, format_ms, version_string

log = logging.getLogger(__name__)

# Stream ids under the root seed.
_INIT_STREAM: Final = 1
_SHUFFLE_STREAM: Final = 2
_BASELINE_STREAM: Final = 3


@dataclass(frozen=True, slots=True)
class RunDir:
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.checkpoints / f"epoch_{epoch:02d}.sqrl"

    def __truediv__(self, name: str) -> Path:
        return self.root / name


def prepare_run_dir(config: RunConfig) -> RunDir:
    run = RunDir(config.out_dir)
    run.checkpoints.mkdir(parents=True, exist_ok=True)
    dump_json(run / "config.json", {"config": config.to_json(), "sha256": config.digest()})
    (run / "version.txt").write_text(version_string() + "\n", encoding="utf-8")
    return run


# ---------------------------------------------------------------- data plumbing


def open_dataset(config: RunConfig) -> Dataset:
    return load_dataset(
        config.data_dir,
        karpathy_json=config.karpathy_json,
        features_dir=config.features_dir,
        min_count=config.min_count,
    )


def split_ids(data: Dataset, split: SplitName, limit: int = 0) -> list[ImageId]:
    """Ids of a split that have features; `limit` > 0 keeps only the first few."""
    ids = list(data.corpus.splits.ids(split))
    if isinstance(data.features, FeatureDirectory):
        usable = [i for i in ids if data.features.has(i)]
        if len(usable) < len(ids):
            log.warning("%d of %d %s images have no features and are skipped.", len(ids) - len(usable), len(ids), split)
        ids = usable
    return ids[:limit] if limit > 0 else ids


def reference_words(data: Dataset, ids: Sequence[ImageId]) -> list[list[Words]]:
    return [[tokenize(c) for c in data.corpus.captions[i].captions] for i in ids]


def make_reward_fn(data: Dataset, scorer: CiderScorer) -> RewardFn:
    """Per-image CIDEr (0-10 scale) of a decoded caption against its references."""
    cache: dict[ImageId, list[Words]] = {}

    def reward(image_id: ImageId, caption: TokenSeq) -> float:
        refs = cache.get(image_id)
        if refs is None:
            refs = cache[image_id] = [tokenize(c) for c in data.corpus.captions[image_id].captions]
        return scorer(data.vocab.decode(caption), refs)

    return reward


def iter_batches(ids: Sequence[ImageId], batch_size: int, rng: np.random.Generator) -> Iterator[list[ImageId]]:
    order = rng.permutation(len(ids))
    for start in range(0, len(ids), batch_size):
        yield [ids[int(k)] for k in order[start : start + batch_size]]


def ce_batch(data: Dataset, ids: Sequence[ImageId], epoch: int, max_len: int) -> CaptionBatch:
    """Teacher-forcing batch; reference `epoch % n_refs` of each image is the target."""
    captions = []
    for image_id in ids:
        refs = data.corpus.captions[image_id].captions
        captions.append(data.vocab.encode(refs[epoch % len(refs)], max_len=max_len))
    return CaptionBatch(tuple(ids), stack_features(data.features, ids), tuple(captions))


def rl_batch(data: Dataset, ids: Sequence[ImageId]) -> CaptionBatch:
    # RL steps only read ids and features; the target captions are placeholders.
    placeholder = TokenSeq((BOS, EOS))
    return CaptionBatch(tuple(ids), stack_features(data.features, ids), (placeholder,) * len(ids))


# ---------------------------------------------------------------- model plumbing


def build_model(config: RunConfig, data: Dataset) -> tuple[ModelParams, DecoderConfig, AdamState | None]:
    model_cfg = config.decoder(len(data.vocab), data.features.feat_dim)
    params = init_params(model_cfg, derive_rng(config.seed, _INIT_STREAM))
    state = None
    if config.checkpoint_in is not None:
        state = load_checkpoint(config.checkpoint_in, params)
    log.info(
        "Model: %d parameters, d_model=%d, vocab=%d, regions=%d x %d.",
        params.count(),
        model_cfg.d_model,
        model_cfg.vocab_size,
        data.features.n_regions,
        model_cfg.feat_dim,
    )
    return params, model_cfg, state


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True, slots=True)
class ImageScore:
    image_id: int
    caption: str
    cider: float


@dataclass(frozen=True, slots=True)
class EvalReport:
    split: str
    metrics: MetricReport
    diversity: DiversityReport
    per_image: tuple[ImageScore, ...]
    config_hash: str
    wall_ms: float

    def to_json(self) -> dict[str, object]:
        """Everything but wall time, so reruns produce identical bytes."""
        return {
            "split": self.split,
            "metrics": {str(k): v for k, v in self.metrics.as_row().items()},
            "diversity": self.diversity.to_dict(),
            "per_image": [asdict(s) for s in self.per_image],
            "config_sha256": self.config_hash,
            "notes": "SPICE is not computed.",
        }


def decode_split(
    params: ModelParams,
    model_cfg: DecoderConfig,
    data: Dataset,
    ids: Sequence[ImageId],
    decode: DecodeConfig,
) -> list[Words]:
    model = step_fn(params, model_cfg)
    return [data.vocab.decode(beam_decode(data.features.get(i), model, decode)) for i in ids]


def evaluate(
    params: ModelParams,
    model_cfg: DecoderConfig,
    data: Dataset,
    split: SplitName,
    config: RunConfig,
    *,
    limit: int = 0,
) -> EvalReport:
    """Beam-decode a split and score it; CIDEr statistics come from that split's references."""
    started = time.perf_counter()
    ids = split_ids(data, split, limit)
    if not ids:
        msg = f"split '{split}' has no images to evaluate"
        raise DataError(msg)
    candidates = decode_split(params, model_cfg, data, ids, config.decode())
    references = reference_words(data, ids)
    metrics = score_corpus(candidates, references, config.cider_variant)
    scorer = CiderScorer.from_references(references, config.cider_variant)
    per_image = tuple(
        ImageScore(int(i), " ".join(c), scorer(c, r)) for i, c, r in zip(ids, candidates, references, strict=True)
    )
    return EvalReport(
        split=str(split),
        metrics=metrics,
        diversity=score_diversity(candidates),
        per_image=per_image,
        config_hash=config.digest(),
        wall_ms=(time.perf_counter() - started) * 1000,
    )


def random_caption_cider(data: Dataset, split: SplitName, config: RunConfig) -> float:
    """Reported-scale CIDEr of uniformly random word sequences; the floor a trained model must clear."""
    ids = split_ids(data, split, config.val_images)
    if not ids:
        return 0.0
    rng = derive_rng(config.seed, _BASELINE_STREAM)
    first_word = len(SPECIAL_TOKENS)
    if len(data.vocab) <= first_word:
        return 0.0
    candidates: list[Words] = []
    for _ in ids:
        length = int(rng.integers(1, config.max_len))
        words = rng.integers(first_word, len(data.vocab), size=length)
        candidates.append(data.vocab.decode(TokenSeq((BOS, *(TokenId(int(w)) for w in words), EOS))))
    return score_corpus(candidates, reference_words(data, ids), config.cider_variant).cider


def write_report(run: RunDir, report: EvalReport) -> None:
    dump_json(run / "report.json", report.to_json())
    with (run / "report.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        row = report.metrics.as_row()
        writer.writerow([str(name) for name in row])
        writer.writerow([f"{value:.4f}" for value in row.values()])
    dump_json(run / "timing.json", {"eval_wall_ms": round(report.wall_ms, 3)})


# ---------------------------------------------------------------- training loops


@dataclass(slots=True)
class _Validation:
    """Keeps best.sqrl and the stability figures in step with each validation."""

    run: RunDir
    tracker: StabilityTracker

    def record(self, params: ModelParams, state: AdamState, cider: float) -> None:
        improved = cider > self.tracker.best
        self.tracker.update(cider)
        if improved:
            save_checkpoint(self.run / "best.sqrl", params, state)


def _validate(
    params: ModelParams,
    model_cfg: DecoderConfig,
    data: Dataset,
    config: RunConfig,
) -> float:
    return evaluate(params, model_cfg, data, "val", config, limit=config.val_images).metrics.cider


def run_ce(config: RunConfig) -> Path:
    """Cross-entropy pretraining; returns the path of final.sqrl."""
    started = time.perf_counter()
    data = open_dataset(config)
    train = split_ids(data, "train")
    if not train:
        msg = "training split is empty"
        raise DataError(msg)
    run = prepare_run_dir(config)
    params, model_cfg, restored = build_model(config, data)
    optimizer = restored if (config.resume and restored is not None) else AdamState.for_params(params)
    state = TrainState(params, optimizer)
    training_log = TrainingLog(run / "log.jsonl", fresh=True)

    steps_per_epoch = -(-len(train) // config.batch_size)
    total_steps = steps_per_epoch * config.ce_epochs
    first_epoch = state.step // steps_per_epoch
    if first_epoch:
        log.info("Resuming cross-entropy at epoch %d (step %d).", first_epoch + 1, state.step)

    baseline = random_caption_cider(data, "val", config)
    log.info("Random-caption validation CIDEr: %.2f", baseline)
    validation = _Validation(run, StabilityTracker(config.collapse_threshold))
    epoch_losses: list[float] = []

    for epoch in range(first_epoch, config.ce_epochs):
        losses: list[float] = []
        rng = derive_rng(config.seed, _SHUFFLE_STREAM, epoch)
        for ids in iter_batches(train, config.batch_size, rng):
            tick = time.perf_counter()
            lr = lr_schedule(state.step, total_steps, config.ce_lr, config.warmup_frac)
            loss = ce_step(ce_batch(data, ids, epoch, config.max_len), state, model_cfg, lr)
            losses.append(loss)
            training_log.append(
                StepRecord(state.step, Stage.CE, loss=loss, lr=lr, epoch=epoch + 1, wall_ms=_ms_since(tick)),
            )
        save_checkpoint(run.epoch_checkpoint(epoch + 1), params, state.optimizer)
        val_cider = _validate(params, model_cfg, data, config)
        validation.record(params, state.optimizer, val_cider)
        training_log.append(StepRecord(state.step, Stage.CE, val_cider=val_cider, epoch=epoch + 1))
        epoch_losses.append(float(np.mean(losses)))
        log.info("CE epoch %d/%d: loss %.4f, val CIDEr %.2f", epoch + 1, config.ce_epochs, epoch_losses[-1], val_cider)

    final = run / "final.sqrl"
    save_checkpoint(final, params, state.optimizer)
    _write_summary(run, Stage.CE, validation.tracker, {"random_caption_cider": baseline, "epoch_losses": epoch_losses})
    _maybe_plot(run, config, Stage.CE)
    dump_json(run / "timing.json", {"train_wall_ms": round(_ms_since(started), 3)})
    log.info("Cross-entropy finished in %s; weights at %s.", format_ms(_ms_since(started)), final)
    return final


def run_rl(config: RunConfig, algorithm: Stage) -> Path:
    """SCST or GRPO fine-tuning from a CE checkpoint; returns the path of final.sqrl."""
    if algorithm not in {Stage.SCST, Stage.GRPO}:
        msg = f"run_rl expects scst or grpo, got {algorithm}"
        raise ConfigError(msg)
    if config.checkpoint_in is None:
        msg = "RL stages need checkpoint_in pointing at a cross-entropy checkpoint"
        raise ConfigError(msg)
    started = time.perf_counter()
    data = open_dataset(config)
    train = split_ids(data, "train")
    if not train:
        msg = "training split is empty"
        raise DataError(msg)
    run = prepare_run_dir(config)
    params, model_cfg, _ = build_model(config, data)
    state = start_rl(params)
    training_log = TrainingLog(run / "log.jsonl", fresh=True)
    train_refs = reference_words(data, train)
    reward_fn = make_reward_fn(data, CiderScorer.from_references(train_refs, config.cider_variant))
    decode = config.decode()

    scst_cfg = config.scst()
    grpo_cfg = config.grpo()
    epochs = scst_cfg.epochs if algorithm is Stage.SCST else grpo_cfg.epochs
    base_lr = scst_cfg.lr if algorithm is Stage.SCST else grpo_cfg.lr
    inner = grpo_cfg.update_steps if (algorithm is Stage.GRPO and grpo_cfg.update_mode is UpdateMode.INNER) else 1
    total_steps = -(-len(train) // config.batch_size) * epochs * inner

    def schedule(step: int) -> float:
        return lr_schedule(step, total_steps, base_lr, warmup_frac=0.0)

    validation = _Validation(run, StabilityTracker(config.collapse_threshold))
    start_cider = _validate(params, model_cfg, data, config)
    validation.record(params, state.optimizer, start_cider)
    training_log.append(StepRecord(0, algorithm, val_cider=start_cider, epoch=0))
    log.info("%s start: val CIDEr %.2f", algorithm.upper(), start_cider)
    last_validated = 0

    for epoch in range(epochs):
        rng = derive_rng(config.seed, _SHUFFLE_STREAM, 1000 + epoch)
        for ids in iter_batches(train, config.batch_size, rng):
            tick = time.perf_counter()
            lr = schedule(state.step)
            batch = rl_batch(data, ids)
            if algorithm is Stage.SCST:
                stats = scst_step(batch, state, model_cfg, decode, reward_fn, lr)
                record = StepRecord(
                    state.step,
                    algorithm,
                    loss=stats.loss,
                    mean_reward=stats.mean_reward,
                    mean_advantage=stats.mean_advantage,
                    lr=lr,
                    epoch=epoch + 1,
                    wall_ms=_ms_since(tick),
                )
            else:
                g = grpo_step(batch, state, grpo_cfg, model_cfg, decode, reward_fn, schedule)
                record = StepRecord(
                    state.step,
                    algorithm,
                    loss=g.loss,
                    mean_reward=g.mean_reward,
                    mean_kl=g.mean_kl,
                    clip_frac=g.clip_fraction,
                    mean_advantage=g.mean_abs_advantage,
                    lr=lr,
                    epoch=epoch + 1,
                    wall_ms=_ms_since(tick),
                )
            training_log.append(record)
            if algorithm is Stage.GRPO and state.step - last_validated >= config.val_every:
                last_validated = state.step
                _log_validation(algorithm, params, state, model_cfg, data, config, validation, training_log, epoch + 1)
        save_checkpoint(run.epoch_checkpoint(epoch + 1), params, state.optimizer)
        if state.step != last_validated:
            last_validated = state.step
            _log_validation(algorithm, params, state, model_cfg, data, config, validation, training_log, epoch + 1)

    final = run / "final.sqrl"
    save_checkpoint(final, params, state.optimizer)
    _write_summary(run, algorithm, validation.tracker, {"start_val_cider": start_cider})
    _maybe_plot(run, config, algorithm)
    dump_json(run / "timing.json", {"train_wall_ms": round(_ms_since(started), 3)})
    log.info("%s finished in %s; weights at %s.", algorithm.upper(), format_ms(_ms_since(started)), final)
    return final


def _log_validation(
    stage: Stage,
    params: ModelParams,
    state: TrainState,
    model_cfg: DecoderConfig,
    data: Dataset,
    config: RunConfig,
    validation: _Validation,
    training_log: TrainingLog,
    epoch: int,
) -> None:
    cider = _validate(params, model_cfg, data, config)
    validation.record(params, state.optimizer, cider)
    training_log.append(StepRecord(state.step, stage, val_cider=cider, epoch=epoch))
    log.info("Step %d: val CIDEr %.2f (best %.2f)", state.step, cider, validation.tracker.best)


def _write_summary(run: RunDir, stage: Stage, tracker: StabilityTracker, extra: dict[str, object]) -> None:
    dump_json(
        run / "summary.json",
        {
            "stage": str(stage),
            "val_cider_history": tracker.history,
            "best_val_cider": tracker.best if tracker.history else None,
            "final_val_cider": tracker.history[-1] if tracker.history else None,
            "max_relative_drop": tracker.max_relative_drop,
            "collapse_threshold": tracker.collapse_threshold,
            **extra,
        },
    )


def _maybe_plot(run: RunDir, config: RunConfig, stage: Stage) -> None:
    if not config.plot:
        return
    if not curves.AVAILABLE:
        log.warning("plot requested but matplotlib is not installed.")
        return
    png = curves.plot_curves({str(stage): TrainingLog(run / "log.jsonl").validation_curve()}, f"{stage.upper()} validation CIDEr")
    (run / "val_curve.png").write_bytes(png.getvalue())


def _ms_since(tick: float) -> float:
    return (time.perf_counter() - tick) * 1000


# ---------------------------------------------------------------- other stages


def run_eval(config: RunConfig) -> EvalReport:
    if config.checkpoint_in is None:
        msg = "eval needs checkpoint_in"
        raise ConfigError(msg)
    data = open_dataset(config)
    run = prepare_run_dir(config)
    params, model_cfg, _ = build_model(config, data)
    report = evaluate(params, model_cfg, data, config.split, config)
    write_report(run, report)
    log.info(
        "Evaluated %d %s images in %s: CIDEr %.2f, BLEU-4 %.2f",
        len(report.per_image),
        report.split,
        format_ms(report.wall_ms),
        report.metrics.cider,
        report.metrics.bleu4,
    )
    return report


def read_annotations(path: Path) -> dict[ImageId, list[str]]:
    """{"annotations": [{"image_id", "caption"}, ...]} grouped by image."""
    payload = load_json(path)
    grouped: dict[ImageId, list[str]] = defaultdict(list)
    try:
        for entry in payload["annotations"]:
            grouped[ImageId(int(entry["image_id"]))].append(str(entry["caption"]))
    except (KeyError, TypeError, ValueError) as e:
        msg = f"{path}: malformed annotations ({e!r})"
        raise DataError(msg) from e
    return dict(grouped)


def run_score(config: RunConfig) -> MetricReport:
    """Metrics only: score candidate captions against reference captions."""
    if config.references is None or config.candidates is None:
        msg = "score needs both references and candidates"
        raise ConfigError(msg)
    references = read_annotations(config.references)
    candidates = read_annotations(config.candidates)
    missing = sorted(set(candidates) - set(references))
    if missing:
        msg = f"{len(missing)} candidate images have no references (first: {missing[0]})"
        raise DataError(msg)
    ids = sorted(candidates)
    if not ids:
        msg = f"{config.candidates} holds no candidate captions"
        raise DataError(msg)
    for image_id in ids:
        if len(candidates[image_id]) > 1:
            log.warning("Image %d has %d candidates; scoring the first.", image_id, len(candidates[image_id]))
    cand_words = [tokenize(candidates[i][0]) for i in ids]
    ref_words = [[tokenize(c) for c in references[i]] for i in ids]
    metrics = score_corpus(cand_words, ref_words, config.cider_variant)
    report = EvalReport(
        split="score",
        metrics=metrics,
        diversity=score_diversity(cand_words),
        per_image=(),
        config_hash=config.digest(),
        wall_ms=0.0,
    )
    config.out_dir.mkdir(parents=True, exist_ok=True)
    write_report(RunDir(config.out_dir), report)
    return metrics


def run_gen_data(config: RunConfig) -> Path:
    if config.data_dir is None:
        msg = "gen-data needs data_dir"
        raise ConfigError(msg)
    generate_dataset(config.data_dir, config.seed, config.n_images, config.grid_size)
    return config.data_dir


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True, slots=True)
class ComparisonRow:
    label: str
    stage: str
    metrics: dict[str, float]
    max_relative_drop: float | None
    curve: list[tuple[int, float]]


def compare_runs(run_dirs: Sequence[Path]) -> list[ComparisonRow]:
    """Collect report.json, summary.json and validation curves from finished runs."""
    rows: list[ComparisonRow] = []
    for root in run_dirs:
        report_path = root / "report.json"
        if not report_path.is_file():
            msg = f"{root} has no report.json; run eval on it first"
            raise DataError(msg)
        report = load_json(report_path)
        summary = load_json(root / "summary.json") if (root / "summary.json").is_file() else {}
        config = load_json(root / "config.json") if (root / "config.json").is_file() else {}
        stage = str(summary.get("stage") or config.get("config", {}).get("stage", "?"))
        rows.append(
            ComparisonRow(
                label=root.name,
                stage=stage,
                metrics={str(name): float(report["metrics"][str(name)]) for name in MetricName},
                max_relative_drop=summary.get("max_relative_drop"),
                curve=TrainingLog(root / "log.jsonl").validation_curve(),
            ),
        )
    return rows


def write_comparison_csv(path: Path, rows: Sequence[ComparisonRow]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["run", "stage", *(str(name) for name in MetricName), "max_relative_drop"])
        for row in rows:
            drop = "" if row.max_relative_drop is None else f"{row.max_relative_drop:.4f}"
            writer.writerow([row.label, row.stage, *(f"{row.metrics[str(n)]:.2f}" for n in MetricName), drop])


