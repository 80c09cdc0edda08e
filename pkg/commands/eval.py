from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from modules.CliCore import config_from_args
from modules.enums import Stage
from modules.harness import run_eval
from modules.utils import format_ms

if TYPE_CHECKING:
    import argparse

    from modules.CliCore import CliCore

log = logging.getLogger(__name__)


def setup(cli: CliCore) -> None:
    def evaluate(args: argparse.Namespace) -> None:
        config = config_from_args(args, Stage.EVAL)
        report = run_eval(config)
        row = {str(k): v for k, v in report.metrics.as_row().items()}
        cli.console.print(cli.metric_table(f"{report.split} split, beam {config.beam_size}", {config.out_dir.name: row}))
        diversity = report.diversity
        cli.console.print(
            f"distinct-1 {diversity.distinct_1:.3f}  distinct-2 {diversity.distinct_2:.3f}  "
            f"vocabulary {diversity.vocabulary}  mean length {diversity.mean_length:.2f}  "
            f"({len(report.per_image)} images in {format_ms(report.wall_ms)})",
        )

    cli.add_command("eval", "Beam-decode a split with a checkpoint and score every metric.", evaluate)
