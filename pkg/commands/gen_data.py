from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from modules.CliCore import config_from_args
from modules.enums import Stage
from modules.harness import run_gen_data

if TYPE_CHECKING:
    import argparse

    from modules.CliCore import CliCore

log = logging.getLogger(__name__)


def setup(cli: CliCore) -> None:
    def gen_data(args: argparse.Namespace) -> None:
        config = config_from_args(args, Stage.GEN_DATA)
        root = run_gen_data(config)
        cli.console.print(
            f"Wrote {config.n_images} synthetic scenes ({config.grid_size}x{config.grid_size} grid, seed {config.seed}) to {root}",
        )

    cli.add_command("gen-data", "Generate the synthetic shapes captioning dataset.", gen_data)
