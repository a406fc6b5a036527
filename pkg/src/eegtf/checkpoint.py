"""Checkpoint container format (magic ``NDXC``).

Layout, little-endian:
  magic "NDXC" | version u16 = 1 |
  metadata byte length u32 + UTF-8 ``key=value`` lines |
  entry count u32 | entries: name length u16 + name UTF-8 + rank u8 +
  dims u64[rank] + float64 payload |
  CRC-32 (u32) of every byte between the version field and the checksum.

Metadata always carries stage, lambda_f, seed and policy plus a config echo;
merge history and adapter alphas ride along as extra keys so a model can be
rebuilt exactly. Arrays are stored in float64, so save -> load -> forward is
bit-identical to the in-memory model.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ChecksumError",
    "VersionMismatchError",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"NDXC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return int(self.meta.get("stage", "0"))

    @property
    def lambda_f(self) -> float:
        return float(self.meta.get("lambda_f", "0"))

    @property
    def policy(self) -> str:
        return self.meta.get("policy", "")

    @property
    def seed(self) -> int:
        return int(self.meta.get("seed", "0"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta_text = "".join("%s=%s\n" % (k, v) for k, v in sorted(ckpt.meta.items()))
    meta_bytes = meta_text.encode("utf-8")
    body = bytearray()
    body += struct.pack("<H", FORMAT_VERSION)
    body += struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        body += struct.pack("<H", len(name_b)) + name_b
        body += struct.pack("<B", arr.ndim)
        body += struct.pack("<%dQ" % arr.ndim, *arr.shape)
        body += arr.tobytes(order="C")
    crc = zlib.crc32(bytes(body))
    Path(path).write_bytes(MAGIC + bytes(body) + struct.pack("<I", crc))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic %r (expected %r)" % (raw[:4], MAGIC))
    if len(raw) < 4 + 2 + 4:
        raise CheckpointError("file too short: %d bytes" % len(raw))
    body, crc_stored = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise ChecksumError("payload checksum mismatch")
    offset = 0

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, offset)
        offset += size
        return vals

    (version,) = take("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatchError("checkpoint version %d (expected %d)"
                                   % (version, FORMAT_VERSION))
    (meta_len,) = take("<I")
    meta_bytes = body[offset:offset + meta_len]
    offset += meta_len
    meta: dict[str, str] = {}
    for line in meta_bytes.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    (count,) = take("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<B")
        dims = take("<%dQ" % rank) if rank else ()
        n_items = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(body, dtype="<f8", count=n_items, offset=offset).reshape(dims)
        offset += n_items * 8
        params[name] = arr.copy()
    if offset != len(body):
        raise CheckpointError("trailing bytes after parameter table")
    return Checkpoint(params=params, meta=meta)
