"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic     6 bytes   b"TPIDM\\0"
    version   u16
    meta_len  u32
    meta      meta_len bytes of UTF-8 JSON
    count     u64       number of parameters
    blob      count * f32
    checksum  8 bytes   BLAKE2b-64 digest of the blob

Parameters are rounded to float32 on save; that is the only precision loss.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError

MAGIC = b"TPIDM\0"
VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    params: np.ndarray
    meta: dict


def checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def to_bytes(params: np.ndarray, meta: dict) -> bytes:
    blob = np.asarray(params, dtype="<f4").tobytes()
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    n = np.asarray(params).size
    return b"".join(
        [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(text)), text, struct.pack("<Q", n), blob, checksum(blob)]
    )


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    def fail(why: str):
        raise CorruptCheckpointError(f"{source}: {why}")

    if len(raw) < len(MAGIC) + 6 or raw[: len(MAGIC)] != MAGIC:
        fail("not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<H", raw, pos)
    if version != VERSION:
        fail(f"unsupported format version {version}")
    pos += 2
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + meta_len + 8 > len(raw):
        fail("truncated metadata")
    try:
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        fail(f"unreadable metadata ({exc})")
    pos += meta_len
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    end = pos + 4 * count
    if end + 8 != len(raw):
        fail(f"size mismatch: {count} parameters declared, file has {len(raw)} bytes")
    blob = raw[pos:end]
    if checksum(blob) != raw[end:]:
        fail("checksum mismatch")
    params = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    return Checkpoint(params, meta)


def save(path, params: np.ndarray, meta: dict) -> None:
    """Write atomically: a temporary file in the same directory is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(params, meta))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    return from_bytes(raw, str(path))
