"""Binary checkpoint container.

Byte layout (all integers little-endian):

    offset 0   magic ``DTLC`` (4 bytes)
    +4         u32 format version (currently 1)
    +8         u32 tensor count
    then per tensor, in map order:
               u32 name byte-length, UTF-8 name,
               u32 rank, rank x u64 extents,
               prod(extents) x f32 IEEE-754 values
    finally    u32 metadata byte-length, UTF-8 JSON text holding the model
               config, stage tag, seed (the root rng state for every derived
               stream), and the metrics history

Serialization is canonical: encoding the result of a decode reproduces the
input bytes exactly, so checkpoints can be compared by file hash.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"DTLC"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_MAX_RANK = 8


@dataclass
class Checkpoint:
    """Named float32 tensors plus the bookkeeping needed to resume a run."""

    tensors: dict[str, np.ndarray]
    config: dict
    stage: str
    seed: int
    history: list = field(default_factory=list)

    def __post_init__(self):
        canonical = {}
        for name, values in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise CheckpointFormatError(f"invalid tensor name {name!r}")
            canonical[name] = np.ascontiguousarray(values, dtype="<f4")
        self.tensors = canonical
        self.seed = int(self.seed)

    def group_tensors(self, group: str) -> dict[str, np.ndarray]:
        prefix = group + "."
        return {n: v for n, v in self.tensors.items() if n.startswith(prefix)}


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes for {what}, "
                f"had {len(self.buf) - self.pos}", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        (value,) = _U32.unpack(self.take(4, what))
        return value

    def u64(self, what: str) -> int:
        (value,) = _U64.unpack(self.take(8, what))
        return value


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    chunks = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(ckpt.tensors))]
    for name, values in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(values.ndim))
        for extent in values.shape:
            chunks.append(_U64.pack(extent))
        chunks.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    meta = json.dumps(
        {"config": ckpt.config, "stage": ckpt.stage, "seed": ckpt.seed,
         "history": ckpt.history},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(_U32.pack(len(meta)))
    chunks.append(meta)
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    reader = _Reader(bytes(buf))
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(
            f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported format version {version}", offset=4)
    count = reader.u32("tensor count")

    tensors: dict[str, np.ndarray] = {}
    for index in range(count):
        name_start = reader.pos
        name_len = reader.u32(f"tensor {index} name length")
        raw_name = reader.take(name_len, f"tensor {index} name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(
                f"tensor {index} name is not valid UTF-8: {exc}",
                offset=name_start + 4) from exc
        if not name:
            raise CheckpointFormatError(
                f"tensor {index} has an empty name", offset=name_start)
        if name in tensors:
            raise CheckpointFormatError(
                f"duplicate tensor name {name!r}", offset=name_start)
        rank_at = reader.pos
        rank = reader.u32(f"tensor {name!r} rank")
        if rank > _MAX_RANK:
            raise CheckpointFormatError(
                f"tensor {name!r} rank {rank} exceeds limit {_MAX_RANK}",
                offset=rank_at)
        shape = tuple(reader.u64(f"tensor {name!r} extent {axis}")
                      for axis in range(rank))
        size = 1
        for extent in shape:
            size *= extent
        raw = reader.take(4 * size, f"tensor {name!r} values")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    meta_at = reader.pos
    meta_len = reader.u32("metadata length")
    raw_meta = reader.take(meta_len, "metadata")
    try:
        meta = json.loads(raw_meta.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(
            f"metadata is not valid UTF-8 JSON: {exc}",
            offset=meta_at + 4) from exc
    if not isinstance(meta, dict) or not {"config", "stage", "seed"} <= meta.keys():
        raise CheckpointFormatError(
            "metadata must be an object with config, stage and seed",
            offset=meta_at + 4)
    if reader.pos != len(reader.buf):
        raise CheckpointFormatError(
            f"{len(reader.buf) - reader.pos} trailing bytes after metadata",
            offset=reader.pos)

    return Checkpoint(tensors=tensors, config=meta["config"],
                      stage=str(meta["stage"]), seed=int(meta["seed"]),
                      history=meta.get("history", []))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = encode_checkpoint(ckpt)
    with open(path, "wb") as handle:
        handle.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())
