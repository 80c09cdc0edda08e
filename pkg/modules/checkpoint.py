"""Binary checkpoint format.

Layout (little-endian):
    b"SQRL" | version u32 | repeated records:
        name_len u32 | name utf-8 | rank u32 | dims u64 * rank | payload f64 * prod(dims)

Optimizer state travels in the same file under the `adam.` prefix so that a
resumed run continues bit-identically.
"""

from __future__ import annotations

import logging
import struct
from typing import TYPE_CHECKING, Final

import numpy as np

from modules.exceptions import CheckpointError, ShapeError
from modules.optim import AdamState

if TYPE_CHECKING:
    from collections.abc import Mapping
    from pathlib import Path

    from modules.dtypes import FloatArray
    from modules.params import ModelParams

log = logging.getLogger(__name__)

MAGIC: Final = b"SQRL"
VERSION: Final = 1
_ADAM_FIRST: Final = "adam.first/"
_ADAM_SECOND: Final = "adam.second/"
_ADAM_STEP: Final = "adam.step"


def encode_records(arrays: Mapping[str, FloatArray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, array in arrays.items():
        value = np.ascontiguousarray(array, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes())
    return b"".join(chunks)


def decode_records(blob: bytes, *, source: str = "<bytes>") -> dict[str, FloatArray]:
    if blob[:4] != MAGIC:
        msg = f"{source}: not a checkpoint (bad magic {blob[:4]!r})"
        raise CheckpointError(msg)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        msg = f"{source}: unsupported checkpoint version {version}"
        raise CheckpointError(msg)
    offset = 8
    arrays: dict[str, FloatArray] = {}
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if offset + 8 * count > len(blob):
                msg = f"{source}: record '{name}' is truncated"
                raise CheckpointError(msg)
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
            offset += 8 * count
    except (struct.error, UnicodeDecodeError) as e:
        msg = f"{source}: corrupt checkpoint at byte {offset}"
        raise CheckpointError(msg) from e
    return arrays


def save_checkpoint(path: Path, params: ModelParams, state: AdamState | None = None) -> None:
    arrays: dict[str, FloatArray] = dict(params.arrays())
    if state is not None:
        for name in params:
            arrays[_ADAM_FIRST + name] = state.first.get(name, np.zeros_like(params[name].data))
            arrays[_ADAM_SECOND + name] = state.second.get(name, np.zeros_like(params[name].data))
        arrays[_ADAM_STEP] = np.array([float(state.step)])
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_records(arrays))
    tmp.replace(path)
    log.info("Saved checkpoint %s (%d arrays).", path, len(arrays))


def load_checkpoint(path: Path, params: ModelParams) -> AdamState | None:
    """Load values into `params` in place; returns the optimizer state if the file has one."""
    try:
        blob = path.read_bytes()
    except OSError as e:
        msg = f"cannot read checkpoint {path}: {e}"
        raise CheckpointError(msg) from e
    arrays = decode_records(blob, source=str(path))
    weights = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    try:
        params.load_arrays(weights)
    except ShapeError as e:
        msg = f"{path}: checkpoint does not match the model config ({e})"
        raise CheckpointError(msg) from e
    if _ADAM_STEP not in arrays:
        return None
    state = AdamState(
        first={name: arrays[_ADAM_FIRST + name] for name in params if _ADAM_FIRST + name in arrays},
        second={name: arrays[_ADAM_SECOND + name] for name in params if _ADAM_SECOND + name in arrays},
        step=int(arrays[_ADAM_STEP][0]),
    )
    log.info("Loaded checkpoint %s with optimizer state at step %d.", path, state.step)
    return state
