import math

import pytest

from modules.enums import Stage
from modules.exceptions import DataError, NumericError
from modules.TrainingLog import StepRecord, TrainingLog


def test_records_read_back_in_order(tmp_path):
    log = TrainingLog(tmp_path / "log.jsonl")
    log.append(StepRecord(1, Stage.CE, loss=2.5, lr=1e-3, epoch=1))
    log.append(StepRecord(1, Stage.CE, val_cider=12.0, epoch=1))
    log.append(StepRecord(2, Stage.CE, loss=2.1, lr=1e-3, epoch=1))
    assert [r.step for r in log] == [1, 1, 2]
    assert log.validation_curve() == [(1, 12.0)]


def test_unset_fields_are_left_out(tmp_path):
    log = TrainingLog(tmp_path / "log.jsonl")
    log.append(StepRecord(3, Stage.GRPO, loss=0.1, mean_kl=0.02, clip_frac=0.5))
    line = (tmp_path / "log.jsonl").read_text(encoding="utf-8")
    assert "val_cider" not in line
    assert '"clip_frac": 0.5' in line


def test_fresh_log_replaces_an_earlier_run(tmp_path):
    path = tmp_path / "log.jsonl"
    first = TrainingLog(path, fresh=True)
    first.append(StepRecord(1, Stage.CE, loss=1.0))
    first.append(StepRecord(2, Stage.CE, loss=0.9))

    second = TrainingLog(path, fresh=True)
    second.append(StepRecord(1, Stage.CE, loss=1.0))
    assert [r.step for r in second] == [1]


def test_reopening_without_fresh_keeps_records(tmp_path):
    path = tmp_path / "log.jsonl"
    TrainingLog(path).append(StepRecord(1, Stage.CE, loss=1.0))
    assert len(list(TrainingLog(path))) == 1


@pytest.mark.parametrize(
    "record",
    [
        StepRecord(4, Stage.CE, loss=math.nan),
        StepRecord(4, Stage.GRPO, loss=0.1, mean_kl=math.inf),
        StepRecord(4, Stage.SCST, val_cider=-math.inf),
    ],
)
def test_non_finite_values_raise(tmp_path, record):
    log = TrainingLog(tmp_path / "log.jsonl")
    with pytest.raises(NumericError) as info:
        log.append(record)
    assert info.value.exit_code == 4
    assert list(log) == []


def test_missing_file_reads_empty(tmp_path):
    assert list(TrainingLog(tmp_path / "absent" / "log.jsonl")) == []


def test_corrupt_line_is_a_data_error(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text('{"step": 1, "stage": "ce"}\nnot json\n', encoding="utf-8")
    with pytest.raises(DataError, match=r"log\.jsonl:2"):
        list(TrainingLog(path))
