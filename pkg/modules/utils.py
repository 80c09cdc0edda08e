import logging
import subprocess
from importlib import metadata
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PACKAGE = "captrl"


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """Child stream of the root seed; equal (seed, stream) always gives equal draws."""
    return np.random.default_rng([seed, *stream])


def version_string(repo: Path | None = None) -> str:
    """Package version plus `git describe` output when run from a checkout."""
    try:
        version = metadata.version(PACKAGE)
    except metadata.PackageNotFoundError:
        version = "0+unknown"
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],  # noqa: S607
            cwd=repo or Path(__file__).resolve().parent.parent,
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        log.debug("git describe unavailable; recording the package version only.")
        return version
    return f"{version} ({described})" if described else version


def format_ms(ms: float) -> str:
    """Human-readable duration, e.g. 1h 02m 03s or 850 ms."""
    if ms < 1000:
        return f"{ms:.0f} ms"
    seconds = int(ms // 1000)
    hours, rest = divmod(seconds, 3600)
    minutes, seconds = divmod(rest, 60)
    if hours:
        return f"{hours}h {minutes:02d}m {seconds:02d}s"
    if minutes:
        return f"{minutes}m {seconds:02d}s"
    return f"{ms / 1000:.1f} s"
