"""Caption datasets on disk.

A dataset directory holds:

    captions.json    {"images": [{"id", "split", "captions": [...]}]}
    vocab.txt        one token per line, specials first
    features/        <image_id>.feat region features
    manifest.json    generator settings and split ids
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Final

from modules.dtypes import SPLITS, CaptionSet, ImageId, SplitManifest, SplitName
from modules.exceptions import ConfigError, DataError
from modules.features import FeatureDirectory, FeatureProvider, write_features
from modules.synthetic import CAPTIONS_PER_IMAGE, feature_dim, make_scene, scene_captions, scene_features
from modules.vocab import Vocabulary, build_vocabulary

log = logging.getLogger(__name__)

CAPTIONS_FILE: Final = "captions.json"
VOCAB_FILE: Final = "vocab.txt"
MANIFEST_FILE: Final = "manifest.json"
FEATURES_DIR: Final = "features"
MIN_IMAGES: Final = 10


def dump_json(path: Path, payload: object) -> None:
    """Deterministic JSON: sorted keys, fixed indent, trailing newline."""
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_json(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        msg = f"cannot read {path}: {e}"
        raise DataError(msg) from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        msg = f"{path}:{e.lineno}:{e.colno}: malformed JSON ({e.msg})"
        raise DataError(msg) from e


@dataclass(frozen=True, slots=True)
class CaptionCorpus:
    captions: Mapping[ImageId, CaptionSet]
    splits: SplitManifest

    def split(self, name: SplitName) -> list[CaptionSet]:
        return [self.captions[i] for i in self.splits.ids(name)]

    def __iter__(self) -> Iterator[CaptionSet]:
        return iter(self.captions.values())

    def __len__(self) -> int:
        return len(self.captions)


def _manifest_from(sets: Iterable[CaptionSet]) -> SplitManifest:
    by_split: dict[SplitName, list[ImageId]] = {name: [] for name in SPLITS}
    for item in sets:
        by_split[item.split].append(item.image_id)
    return SplitManifest(*(tuple(sorted(by_split[name])) for name in SPLITS))


def _split_for(index: int, n_images: int) -> SplitName:
    held_out = max(1, n_images // 10)
    if index < n_images - 2 * held_out:
        return "train"
    if index < n_images - held_out:
        return "val"
    return "test"


def generate_dataset(root: Path, seed: int, n_images: int = 2500, grid_size: int = 3) -> CaptionCorpus:
    """Write a synthetic dataset; identical arguments give byte-identical files."""
    if n_images < MIN_IMAGES:
        msg = f"n_images must be at least {MIN_IMAGES}, got {n_images}"
        raise ConfigError(msg)
    feature_root = root / FEATURES_DIR
    feature_root.mkdir(parents=True, exist_ok=True)
    sets: dict[ImageId, CaptionSet] = {}
    for index in range(n_images):
        image_id = ImageId(index)
        scene = make_scene(seed, image_id, grid_size)
        write_features(feature_root / f"{image_id}.feat", scene_features(scene, seed))
        sets[image_id] = CaptionSet(image_id, _split_for(index, n_images), scene_captions(scene))
    corpus = CaptionCorpus(sets, _manifest_from(sets.values()))
    write_captions(root / CAPTIONS_FILE, corpus)
    build_vocabulary(c for item in corpus for c in item.captions).write(root / VOCAB_FILE)
    dump_json(
        root / MANIFEST_FILE,
        {
            "generator": "synthetic-grid",
            "seed": seed,
            "n_images": n_images,
            "grid_size": grid_size,
            "n_regions": grid_size * grid_size,
            "feat_dim": feature_dim(grid_size),
            "captions_per_image": CAPTIONS_PER_IMAGE,
            "splits": {name: list(corpus.splits.ids(name)) for name in SPLITS},
        },
    )
    log.info(
        "Generated %d images (%d/%d/%d) under %s.",
        n_images,
        len(corpus.splits.train),
        len(corpus.splits.val),
        len(corpus.splits.test),
        root,
    )
    return corpus


def write_captions(path: Path, corpus: CaptionCorpus) -> None:
    images = [
        {"id": int(item.image_id), "split": item.split, "captions": list(item.captions)}
        for item in sorted(corpus, key=lambda s: s.image_id)
    ]
    dump_json(path, {"images": images})


def read_captions(path: Path) -> CaptionCorpus:
    payload = load_json(path)
    try:
        entries = payload["images"]
        sets = {
            ImageId(int(e["id"])): CaptionSet(ImageId(int(e["id"])), _check_split(e["split"], path), tuple(e["captions"]))
            for e in entries
        }
    except (KeyError, TypeError, ValueError) as e:
        msg = f"{path}: malformed captions file ({e!r})"
        raise DataError(msg) from e
    for item in sets.values():
        if not item.captions:
            msg = f"{path}: image {item.image_id} has no captions"
            raise DataError(msg)
    return CaptionCorpus(sets, _manifest_from(sets.values()))


def _check_split(value: object, path: Path) -> SplitName:
    match value:
        case "train" | "val" | "test":
            return value
        case _:
            msg = f"{path}: unknown split {value!r}"
            raise DataError(msg)


def load_karpathy_json(path: Path) -> CaptionCorpus:
    """Read a Karpathy-split dataset file; "restval" images join the training split."""
    payload = load_json(path)
    if not isinstance(payload, dict) or "images" not in payload:
        msg = f"{path}: expected an object with an 'images' list"
        raise DataError(msg)
    sets: dict[ImageId, CaptionSet] = {}
    for position, entry in enumerate(payload["images"]):
        if "sentences" not in entry:
            msg = f"{path}: image entry {position} has no 'sentences'"
            raise DataError(msg)
        raw_id = entry.get("cocoid", entry.get("imgid", position))
        split = entry.get("split")
        if split == "restval":
            split = "train"
        captions = tuple(s["raw"].strip() for s in entry["sentences"] if s.get("raw", "").strip())
        if not captions:
            msg = f"{path}: image entry {position} has no usable captions"
            raise DataError(msg)
        image_id = ImageId(int(raw_id))
        sets[image_id] = CaptionSet(image_id, _check_split(split, path), captions)
    log.info("Loaded %d Karpathy-split images from %s.", len(sets), path)
    return CaptionCorpus(sets, _manifest_from(sets.values()))


@dataclass(frozen=True, slots=True)
class Dataset:
    """Captions, vocabulary and features ready for training or evaluation."""

    corpus: CaptionCorpus
    vocab: Vocabulary
    features: FeatureProvider


def load_dataset(
    root: Path | None,
    *,
    karpathy_json: Path | None = None,
    features_dir: Path | None = None,
    min_count: int = 1,
) -> Dataset:
    """Open a generated dataset directory, or a Karpathy JSON with a feature directory."""
    if karpathy_json is not None:
        corpus = load_karpathy_json(karpathy_json)
        vocab_path = root / VOCAB_FILE if root is not None else None
    elif root is not None:
        if not (root / CAPTIONS_FILE).is_file():
            msg = f"{root} is not a dataset directory (no {CAPTIONS_FILE}); run gen-data first"
            raise DataError(msg)
        corpus = read_captions(root / CAPTIONS_FILE)
        vocab_path = root / VOCAB_FILE
    else:
        msg = "either data_dir or karpathy_json must be set"
        raise ConfigError(msg)

    if vocab_path is not None and vocab_path.is_file():
        vocab = Vocabulary.read(vocab_path)
    else:
        vocab = build_vocabulary((c for item in corpus.split("train") for c in item.captions), min_count)

    feature_root = features_dir or (root / FEATURES_DIR if root is not None else None)
    if feature_root is None:
        msg = "no feature directory configured"
        raise ConfigError(msg)
    return Dataset(corpus, vocab, FeatureDirectory(feature_root))
