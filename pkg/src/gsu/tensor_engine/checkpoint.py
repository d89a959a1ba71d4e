"""Portable binary checkpoint format.

Layout (all integers unsigned 64-bit little-endian, floats 64-bit LE):

    magic "PGSU" | format version | entry count
    per entry: name length | name bytes (utf-8) | rank | dims... | payload
    trailer:   step count | hash length | config hash bytes (utf-8)

Optimizer moments ride along as entries prefixed "opt."; they are not model
parameters and inspect reports them separately. Loading validates every
field and reports the byte offset of the first corruption it finds.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "inspect_checkpoint", "CheckpointInfo"]

MAGIC = b"PGSU"
FORMAT_VERSION = 1

_MAX_NAME = 4096
_MAX_RANK = 8
_MAX_ELEMS = 1 << 32


@dataclass
class CheckpointInfo:
    """Summary returned by inspect_checkpoint."""
    entries: list[tuple[str, tuple[int, ...]]]
    step: int
    config_hash: str
    version: int

    @property
    def model_entries(self):
        return [(n, s) for n, s in self.entries if not n.startswith("opt.")]

    @property
    def optimizer_entries(self):
        return [(n, s) for n, s in self.entries if n.startswith("opt.")]

    @property
    def model_param_count(self) -> int:
        return int(sum(int(np.prod(s)) for _, s in self.model_entries))


def save_checkpoint(path, arrays: dict[str, np.ndarray], step: int, config_hash: str = "") -> None:
    path = Path(path)
    hash_bytes = config_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", FORMAT_VERSION, len(arrays)))
        for name, buf in arrays.items():
            name_bytes = name.encode("utf-8")
            buf = np.ascontiguousarray(buf, dtype="<f8")
            fh.write(struct.pack("<Q", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<Q", buf.ndim))
            for dim in buf.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(buf.tobytes())
        fh.write(struct.pack("<QQ", int(step), len(hash_bytes)))
        fh.write(hash_bytes)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"truncated file while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, str]:
    """Read a checkpoint, returning (arrays, step, config_hash)."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file", offset=0)
    version = r.u64("format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", offset=4)
    count = r.u64("entry count")
    if count == 0:
        raise CheckpointError("empty name table", offset=12)
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        name_off = r.offset
        name_len = r.u64(f"name length of entry {i}")
        if name_len == 0 or name_len > _MAX_NAME:
            raise CheckpointError(f"implausible name length {name_len}", offset=name_off)
        try:
            name = r.take(name_len, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"entry {i} name is not valid utf-8", offset=name_off + 8)
        if name in arrays:
            raise CheckpointError(f"duplicate entry name {name!r}", offset=name_off)
        rank_off = r.offset
        rank = r.u64(f"rank of {name!r}")
        if rank > _MAX_RANK:
            raise CheckpointError(f"implausible rank {rank} for {name!r}", offset=rank_off)
        dims = tuple(r.u64(f"dim {d} of {name!r}") for d in range(rank))
        elems = int(np.prod(dims)) if dims else 1
        if elems > _MAX_ELEMS:
            raise CheckpointError(f"implausible element count {elems} for {name!r}", offset=rank_off)
        payload = r.take(8 * elems, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    step = r.u64("step count")
    hash_len = r.u64("hash length")
    if hash_len > _MAX_NAME:
        raise CheckpointError(f"implausible hash length {hash_len}", offset=r.offset - 8)
    config_hash = r.take(hash_len, "config hash").decode("utf-8")
    if r.offset != len(data):
        raise CheckpointError(f"{len(data) - r.offset} trailing bytes after metadata", offset=r.offset)
    return arrays, step, config_hash


def inspect_checkpoint(path) -> CheckpointInfo:
    arrays, step, config_hash = load_checkpoint(path)
    entries = [(name, tuple(buf.shape)) for name, buf in arrays.items()]
    return CheckpointInfo(entries=entries, step=step, config_hash=config_hash, version=FORMAT_VERSION)
