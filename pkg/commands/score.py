from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from modules.CliCore import config_from_args
from modules.enums import Stage
from modules.harness import run_score

if TYPE_CHECKING:
    import argparse

    from modules.CliCore import CliCore

log = logging.getLogger(__name__)


def setup(cli: CliCore) -> None:
    def score(args: argparse.Namespace) -> None:
        config = config_from_args(args, Stage.SCORE)
        metrics = run_score(config)
        label = config.candidates.name if config.candidates else "candidates"
        cli.console.print(cli.metric_table("Caption metrics", {label: {str(k): v for k, v in metrics.as_row().items()}}))
        cli.console.print(f"Report written to {config.out_dir / 'report.json'}")

    cli.add_command("score", "Score candidate captions against references (metrics only).", score)
