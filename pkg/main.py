import logging
import os
import sys
import tempfile

# Linux sandbox before continuing
if os.getenv("CAPTRL_SANDBOX", "1") != "0":
    try:
        from landlock import Ruleset
    except ImportError:
        logging.warning("Skipping sandboxing.")
    else:
        rs = Ruleset()
        rs.allow(".")
        rs.allow(sys.prefix)
        rs.allow(sys.base_prefix)
        rs.allow("/usr/lib64")
        rs.allow("/etc")
        rs.allow("/proc/self")
        rs.allow(tempfile.gettempdir())  # matplotlib cache
        rs.apply()
        logging.info("Succeeded sandboxing.")

from dotenv import load_dotenv
from rich.logging import RichHandler

from modules.CliCore import CliCore

# Loads CAPTRL_* variables from .env
load_dotenv()

level = os.getenv("CAPTRL_LOG_LEVEL", "INFO").upper()

file_handler = logging.FileHandler(filename="captrl.log", encoding="utf-8", mode="a")
dt_fmt = "%Y-%m-%d %H:%M:%S"
formatter = logging.Formatter("[{asctime}] [{levelname:<8}] {name}: {message}", dt_fmt, style="{")
file_handler.setFormatter(formatter)

logging.basicConfig(
    level=level,
    format="{name}: {message}",
    style="{",
    datefmt=dt_fmt,
    handlers=[RichHandler(rich_tracebacks=True, show_path=False), file_handler],
    force=True,
)

log = logging.getLogger(__name__)

cli = CliCore()
cli.load_commands()
sys.exit(cli.run())
