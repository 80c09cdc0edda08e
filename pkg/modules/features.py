"""Region features: the FEAT file format and the providers the trainers read from.

FEAT layout (little-endian): b"FEAT" | version u32 | n_regions u32 | dim u32 | f32 payload.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import TYPE_CHECKING, Final, Protocol

import numpy as np

from modules.dtypes import FeatureGrid, ImageId
from modules.exceptions import DataError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from modules.dtypes import FloatArray

log = logging.getLogger(__name__)

MAGIC: Final = b"FEAT"
VERSION: Final = 1
_HEADER = struct.Struct("<4sIII")


def encode_features(grid: FeatureGrid) -> bytes:
    values = np.ascontiguousarray(grid.values, dtype="<f4")
    return _HEADER.pack(MAGIC, VERSION, grid.n_regions, grid.feat_dim) + values.tobytes()


def decode_features(blob: bytes, *, source: str = "<bytes>") -> FeatureGrid:
    if len(blob) < _HEADER.size:
        msg = f"{source}: feature file is shorter than its header"
        raise DataError(msg)
    magic, version, n_regions, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        msg = f"{source}: bad magic {magic!r}, expected {MAGIC!r}"
        raise DataError(msg)
    if version != VERSION:
        msg = f"{source}: unsupported feature file version {version}"
        raise DataError(msg)
    expected = _HEADER.size + 4 * n_regions * dim
    if len(blob) != expected:
        msg = f"{source}: header declares {n_regions}x{dim} floats but file has {len(blob)} bytes (expected {expected})"
        raise DataError(msg)
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n_regions, dim)
    return FeatureGrid(values.astype(np.float64))


def write_features(path: Path, grid: FeatureGrid) -> None:
    path.write_bytes(encode_features(grid))


def read_features(path: Path) -> FeatureGrid:
    try:
        blob = path.read_bytes()
    except OSError as e:
        msg = f"cannot read feature file {path}: {e}"
        raise DataError(msg) from e
    return decode_features(blob, source=str(path))


class FeatureProvider(Protocol):
    """Anything that can hand out the region features of an image."""

    @property
    def n_regions(self) -> int: ...

    @property
    def feat_dim(self) -> int: ...

    def get(self, image_id: ImageId) -> FeatureGrid: ...


def stack_features(provider: FeatureProvider, image_ids: Sequence[ImageId]) -> FloatArray:
    """(B, R, F) batch for the given images."""
    return np.stack([provider.get(i).values for i in image_ids])


class FeatureDirectory:
    """Reads `<image_id>.feat` files from a directory, keeping what it has read."""

    def __init__(self, root: Path) -> None:
        if not root.is_dir():
            msg = f"feature directory {root} does not exist"
            raise DataError(msg)
        self.root = root
        self._cache: dict[ImageId, FeatureGrid] = {}
        first = next(iter(sorted(root.glob("*.feat"))), None)
        if first is None:
            msg = f"feature directory {root} holds no .feat files"
            raise DataError(msg)
        sample = read_features(first)
        self._shape = (sample.n_regions, sample.feat_dim)

    @property
    def n_regions(self) -> int:
        return self._shape[0]

    @property
    def feat_dim(self) -> int:
        return self._shape[1]

    def has(self, image_id: ImageId) -> bool:
        return image_id in self._cache or (self.root / f"{image_id}.feat").is_file()

    def get(self, image_id: ImageId) -> FeatureGrid:
        grid = self._cache.get(image_id)
        if grid is None:
            grid = read_features(self.root / f"{image_id}.feat")
            if (grid.n_regions, grid.feat_dim) != self._shape:
                msg = f"features of image {image_id} are {grid.values.shape}, expected {self._shape}"
                raise DataError(msg)
            self._cache[image_id] = grid
        return grid
