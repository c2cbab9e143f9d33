"""Binary tensor records and manifest-wrapped checkpoint files.

A tensor record is a u32 little-endian rank, then one u32 per dimension,
then the row-major float64 buffer, also little-endian. A checkpoint is the
magic line ``MBCKPT1\\n``, a u32 byte length, a UTF-8 JSON manifest with the
ordered record names plus free-form metadata, and the records in manifest
order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MBCKPT1\n"


def write_tensor(fh, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.float64)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.astype("<f8", copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise ValueError("truncated tensor record")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(path, records: list[tuple[str, np.ndarray]], metadata: dict) -> None:
    names = [name for name, _ in records]
    if len(set(names)) != len(names):
        raise ValueError("duplicate record names in checkpoint")
    manifest = json.dumps({"records": names, "metadata": metadata}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for _, array in records:
            write_tensor(fh, array)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(n).decode("utf-8"))
        records = {name: read_tensor(fh) for name in manifest["records"]}
    return records, manifest["metadata"]


def checkpoint_metadata(path) -> dict:
    with open(Path(path), "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n).decode("utf-8"))["metadata"]
