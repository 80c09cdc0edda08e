import argparse
import importlib
import logging
import pathlib
from collections.abc import Callable, Mapping, Sequence
from typing import ClassVar

from rich.console import Console
from rich.table import Table

from modules.config import RunConfig, require
from modules.enums import Stage
from modules.utils import version_string

log = logging.getLogger(__name__)

type Handler = Callable[[argparse.Namespace], int | None]
# Returns an exit code when it handled the exception, None to pass it on.
type ErrorHook = Callable[[BaseException], int | None]

COMMANDS_DIR = pathlib.Path(__file__).resolve().parent.parent / "commands"


class CliCore:
    loaded_extensions: ClassVar[list[str]] = []

    def __init__(self) -> None:
        self.parser = argparse.ArgumentParser(
            prog="captrl",
            description="Train and evaluate caption decoders with cross-entropy, SCST and GRPO.",
        )
        self.parser.add_argument("--version", action="version", version=version_string())
        self.subparsers = self.parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
        self.console = Console()
        self.error_console = Console(stderr=True)
        self._error_hooks: list[ErrorHook] = []

    # ------------------------------------------------------------ registration

    def add_command(self, name: str, help_text: str, handler: Handler, *, run_config: bool = True) -> argparse.ArgumentParser:
        sub = self.subparsers.add_parser(name, help=help_text, description=help_text)
        if run_config:
            add_config_options(sub)
        sub.set_defaults(handler=handler)
        return sub

    def on_error(self, hook: ErrorHook) -> ErrorHook:
        self._error_hooks.append(hook)
        return hook

    def load_commands(self, directory: pathlib.Path = COMMANDS_DIR) -> None:
        """Import every commands/<name>.py and call its setup(cli)."""
        for file in sorted(directory.glob("*.py")):
            if not file.is_file() or file.stem.startswith("_"):
                continue
            try:
                module = importlib.import_module(f"commands.{file.stem}")
            except ImportError:
                log.exception("Failed to load dependencies for command module 'commands.%s'.", file.stem)
                continue
            setup = getattr(module, "setup", None)
            if setup is None:
                log.error("commands.%s has no setup(cli); skipped.", file.stem)
                continue
            setup(self)
            self.loaded_extensions.append(file.stem)
            log.debug("Loaded %s", file.stem)

    # ------------------------------------------------------------ dispatch

    def run(self, argv: Sequence[str] | None = None) -> int:
        args = self.parser.parse_args(argv)
        try:
            code = args.handler(args)
        except (Exception, KeyboardInterrupt) as error:
            for hook in self._error_hooks:
                handled = hook(error)
                if handled is not None:
                    return handled
            raise
        return 0 if code is None else code

    # ------------------------------------------------------------ output

    def metric_table(self, title: str, rows: Mapping[str, Mapping[str, float]]) -> Table:
        """One row per run, columns in the order of the first row's mapping."""
        table = Table(title=title)
        table.add_column("run", style="bold")
        columns = list(next(iter(rows.values()), {}))
        for column in columns:
            table.add_column(column, justify="right")
        for label, values in rows.items():
            table.add_row(label, *(f"{values[c]:.2f}" for c in columns))
        return table


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_options(parser: argparse.ArgumentParser) -> None:
    """--config FILE plus one flag per RunConfig field; unset flags stay None."""
    parser.add_argument("--config", type=pathlib.Path, default=None, help="flat key = value run-config file")
    group = parser.add_argument_group("run configuration")
    for f in RunConfig.__dataclass_fields__.values():
        if f.name == "stage":
            continue
        help_text = f"{f.metadata['help']} (default: {f.default})"
        if isinstance(f.default, bool):
            group.add_argument(_flag(f.name), dest=f.name, action="store_const", const="true", default=None, help=help_text)
        else:
            group.add_argument(_flag(f.name), dest=f.name, default=None, metavar=f.name.upper(), help=help_text)


def config_from_args(args: argparse.Namespace, stage: Stage) -> RunConfig:
    """Resolve defaults < environment < --config file < flags for `stage`."""
    cli = {
        name: str(getattr(args, name))
        for name in RunConfig.field_names()
        if name != "stage" and getattr(args, name, None) is not None
    }
    cli["stage"] = str(stage)
    config = require(RunConfig.layered(cli, args.config))
    log.debug("Resolved %s config %s", stage, config.digest()[:12])
    return config
