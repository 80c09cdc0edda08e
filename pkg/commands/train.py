from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from modules.CliCore import config_from_args
from modules.enums import Stage
from modules.harness import run_ce, run_rl

if TYPE_CHECKING:
    import argparse

    from modules.CliCore import CliCore

log = logging.getLogger(__name__)

TRAIN_STAGES = (Stage.CE, Stage.SCST, Stage.GRPO)


def setup(cli: CliCore) -> None:
    def train(args: argparse.Namespace) -> None:
        stage = Stage(args.stage)
        config = config_from_args(args, stage)
        final = run_ce(config) if stage is Stage.CE else run_rl(config, stage)
        cli.console.print(f"[green]{stage.upper()} training done.[/] Final weights: {final}")

    parser = cli.add_command("train", "Run cross-entropy pretraining or SCST/GRPO fine-tuning.", train)
    parser.add_argument("--stage", choices=[str(s) for s in TRAIN_STAGES], required=True, help="training stage")
