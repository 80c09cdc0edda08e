from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from modules.exceptions import CaptrlError

if TYPE_CHECKING:
    from modules.CliCore import CliCore

logger = logging.getLogger(__name__)

EXIT_UNEXPECTED = 1
EXIT_INTERRUPTED = 130


class ErrorHandler:
    """Turn exceptions raised by commands into one-line messages and exit codes.

    CaptrlError subclasses carry their own exit code (config 2, data 3,
    numeric 4). Anything else is a bug and is logged with its traceback.
    """

    def __init__(self, cli: CliCore) -> None:
        self.cli = cli

    def __call__(self, error: BaseException) -> int | None:
        if isinstance(error, CaptrlError):
            logger.debug("Command failed", exc_info=error)
            self.cli.error_console.print(f"[bold red]error:[/] {error}", highlight=False)
            return error.exit_code

        if isinstance(error, KeyboardInterrupt):
            self.cli.error_console.print("interrupted")
            return EXIT_INTERRUPTED

        logger.exception("Unhandled error", exc_info=error)
        self.cli.error_console.print("[bold red]An unexpected error occurred.[/] See captrl.log for the traceback.")
        return EXIT_UNEXPECTED


def setup(cli: CliCore) -> None:
    cli.on_error(ErrorHandler(cli))
