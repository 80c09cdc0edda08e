"""Append-only JSONL training log, one record per optimizer step or validation."""

import json
import logging
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Self

from modules.exceptions import DataError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class StepRecord:
    step: int
    stage: str
    loss: float | None = None
    mean_reward: float | None = None
    mean_kl: float | None = None
    clip_frac: float | None = None
    mean_advantage: float | None = None
    lr: float | None = None
    val_cider: float | None = None
    epoch: int | None = None
    wall_ms: float | None = None

    def to_json(self) -> str:
        fields = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(fields, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> Self:
        return cls(**json.loads(line))


class TrainingLog:
    def __init__(self, path: Path, *, fresh: bool = False) -> None:
        """`fresh` empties an existing log; training runs start that way."""
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        if fresh:
            path.write_text("", encoding="utf-8")
            log.debug("Started a fresh training log at %s", path)

    def append(self, record: StepRecord) -> None:
        numbers = (record.loss, record.mean_reward, record.mean_kl, record.clip_frac, record.lr, record.val_cider)
        if any(v is not None and not math.isfinite(v) for v in numbers):
            msg = f"non-finite value in the step {record.step} {record.stage} log record"
            raise NumericError(msg)
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(record.to_json() + "\n")

    def __iter__(self) -> Iterator[StepRecord]:
        if not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    yield StepRecord.from_json(line)
                except (json.JSONDecodeError, TypeError) as e:
                    msg = f"{self.path}:{number}: bad log record ({e})"
                    raise DataError(msg) from e

    def validation_curve(self) -> list[tuple[int, float]]:
        return [(r.step, r.val_cider) for r in self if r.val_cider is not None]
