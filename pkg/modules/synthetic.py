"""Synthetic captioning task: coloured shapes on a small grid.

Each scene places one or two objects on a `grid_size` x `grid_size` board.
Every cell becomes one feature region:

    one-hot(shape | none) (4) + one-hot(colour) (4) + one-hot(row) + one-hot(col)

plus Gaussian noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Final

import numpy as np

from modules.dtypes import FeatureGrid, ImageId
from modules.exceptions import ConfigError

log = logging.getLogger(__name__)

SHAPES: Final = ("circle", "square", "triangle")
COLORS: Final = ("red", "blue", "green", "yellow")
NOISE_STD: Final = 0.05
CAPTIONS_PER_IMAGE: Final = 5
MAX_OBJECTS: Final = 2


@dataclass(frozen=True, slots=True)
class Shape:
    shape: str
    color: str
    row: int
    col: int

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True, slots=True)
class SyntheticScene:
    scene_id: ImageId
    grid_size: int
    objects: tuple[Shape, ...]  # reading order: row-major

    @property
    def n_regions(self) -> int:
        return self.grid_size * self.grid_size


def feature_dim(grid_size: int) -> int:
    return len(SHAPES) + 1 + len(COLORS) + 2 * grid_size


def _scene_rng(seed: int, scene_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, scene_id, stream])


def make_scene(seed: int, scene_id: ImageId, grid_size: int = 3) -> SyntheticScene:
    """Deterministic in (seed, scene_id, grid_size)."""
    if grid_size < 2:
        msg = f"grid_size must be at least 2, got {grid_size}"
        raise ConfigError(msg)
    rng = _scene_rng(seed, scene_id, 0)
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = sorted(int(c) for c in rng.choice(grid_size * grid_size, size=count, replace=False))
    objects = tuple(
        Shape(
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=COLORS[int(rng.integers(len(COLORS)))],
            row=cell // grid_size,
            col=cell % grid_size,
        )
        for cell in cells
    )
    return SyntheticScene(scene_id, grid_size, objects)


def scene_features(scene: SyntheticScene, seed: int) -> FeatureGrid:
    size = scene.grid_size
    values = np.zeros((scene.n_regions, feature_dim(size)))
    colour_at = len(SHAPES) + 1
    row_at = colour_at + len(COLORS)
    col_at = row_at + size
    occupied = {obj.row * size + obj.col: obj for obj in scene.objects}
    for cell in range(scene.n_regions):
        obj = occupied.get(cell)
        if obj is None:
            values[cell, len(SHAPES)] = 1.0
        else:
            values[cell, SHAPES.index(obj.shape)] = 1.0
            values[cell, colour_at + COLORS.index(obj.color)] = 1.0
        values[cell, row_at + cell // size] = 1.0
        values[cell, col_at + cell % size] = 1.0
    values += _scene_rng(seed, scene.scene_id, 1).normal(0.0, NOISE_STD, size=values.shape)
    # stored as f32 on disk; round here so memory and files agree
    return FeatureGrid(values.astype(np.float32).astype(np.float64))


def _place(obj: Shape, grid_size: int) -> str:
    rows = ("top", "middle", "bottom") if grid_size == 3 else tuple(f"row {i + 1}" for i in range(grid_size))
    cols = ("left", "center", "right") if grid_size == 3 else tuple(f"column {i + 1}" for i in range(grid_size))
    row, col = rows[obj.row], cols[obj.col]
    if row == "middle" and col == "center":
        return "center"
    return f"{row} {col}"


def scene_captions(scene: SyntheticScene) -> tuple[str, ...]:
    """Five distinct paraphrases describing the scene."""
    if len(scene.objects) == 1:
        (obj,) = scene.objects
        where = _place(obj, scene.grid_size)
        return (
            f"a {obj.name} in the {where}",
            f"there is a {obj.name} in the {where}",
            f"the {where} cell holds a {obj.name}",
            f"a single {obj.name} in the {where}",
            f"one {obj.name} sits in the {where}",
        )
    first, second = scene.objects
    if first.row != second.row:
        relation, inverse = "above", "below"
    else:
        relation, inverse = "to the left of", "to the right of"
    a, b = first.name, second.name
    return (
        f"a {a} {relation} a {b}",
        f"the {b} is {inverse} the {a}",
        f"there is a {a} {relation} a {b}",
        f"a {b} {inverse} a {a}",
        f"the {a} sits {relation} the {b}",
    )


class SyntheticFeatureProvider:
    """Regenerates scene features in memory from the dataset seed."""

    def __init__(self, seed: int, grid_size: int = 3) -> None:
        self.seed = seed
        self.grid_size = grid_size

    @property
    def n_regions(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def feat_dim(self) -> int:
        return feature_dim(self.grid_size)

    def get(self, image_id: ImageId) -> FeatureGrid:
        return scene_features(make_scene(self.seed, image_id, self.grid_size), self.seed)
