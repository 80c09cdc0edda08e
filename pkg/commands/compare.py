from __future__ import annotations

import logging
import pathlib
from typing import TYPE_CHECKING

from modules import curves
from modules.harness import compare_runs, write_comparison_csv

if TYPE_CHECKING:
    import argparse

    from modules.CliCore import CliCore

log = logging.getLogger(__name__)


def setup(cli: CliCore) -> None:
    def compare(args: argparse.Namespace) -> None:
        rows = compare_runs(args.runs)
        table = cli.metric_table("Run comparison", {f"{r.label} ({r.stage})": r.metrics for r in rows})
        cli.console.print(table)
        for row in rows:
            if row.max_relative_drop is not None:
                cli.console.print(f"{row.label}: largest validation drop {100 * row.max_relative_drop:.1f}% below its best")
        if args.csv:
            write_comparison_csv(args.csv, rows)
            cli.console.print(f"Wrote {args.csv}")
        if args.plot:
            if not curves.AVAILABLE:
                log.warning("matplotlib is not installed; skipping %s.", args.plot)
                return
            png = curves.plot_curves({r.label: r.curve for r in rows}, "Validation CIDEr")
            args.plot.write_bytes(png.getvalue())
            cli.console.print(f"Wrote {args.plot}")

    parser = cli.add_command("compare", "Tabulate finished runs side by side.", compare, run_config=False)
    parser.add_argument("runs", nargs="+", type=pathlib.Path, help="run directories holding report.json")
    parser.add_argument("--csv", type=pathlib.Path, default=None, help="also write the table as CSV")
    parser.add_argument("--plot", type=pathlib.Path, default=None, help="write validation curves to this PNG")
