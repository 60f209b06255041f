"""Binary checkpoint format for parameter vectors.

Byte layout (all integers little-endian)::

    8 bytes   magic  b"RPMCKPT1"
    u32       format version
    u32       descriptor length L, then L bytes of UTF-8 JSON
    u64       payload count P, then P float32 values
    u64       checksum of the payload bytes (BLAKE2b, 8-byte digest)

The descriptor JSON carries the architecture, the parameter layout and free
metadata such as the training return of the snapshot.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ParamEntry, ParamVector
from .errors import CorruptCheckpoint, VersionMismatch

MAGIC = b"RPMCKPT1"
FORMAT_VERSION = 1


def payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass
class Checkpoint:
    architecture: dict[str, Any]
    params: ParamVector
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    descriptor = {
        "architecture": ckpt.architecture,
        "layout": [[e.name, list(e.shape)] for e in ckpt.params.layout],
        "meta": ckpt.meta,
    }
    text = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(ckpt.params.flat, dtype="<f4").tobytes()
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", ckpt.version),
            struct.pack("<I", len(text)),
            text,
            struct.pack("<Q", len(ckpt.params.flat)),
            payload,
            struct.pack("<Q", payload_checksum(payload)),
        ]
    )


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CorruptCheckpoint("bad magic: not an RPM checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        (text_len,) = struct.unpack_from("<I", blob, 12)
        pos = 16
        descriptor = json.loads(blob[pos : pos + text_len].decode("utf-8"))
        pos += text_len
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        payload = blob[pos : pos + 4 * count]
        pos += 4 * count
        (checksum,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"truncated or malformed checkpoint: {exc}") from exc
    if len(payload) != 4 * count or pos != len(blob):
        raise CorruptCheckpoint("payload length does not match header")
    if payload_checksum(payload) != checksum:
        raise CorruptCheckpoint("payload checksum mismatch")
    try:
        layout, offset = [], 0
        for name, shape in descriptor["layout"]:
            entry = ParamEntry(name, tuple(shape), offset)
            layout.append(entry)
            offset += entry.size
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        params = ParamVector(flat, layout)
    except Exception as exc:  # layout mismatch surfaces as a corrupt file
        raise CorruptCheckpoint(f"invalid parameter layout: {exc}") from exc
    return Checkpoint(descriptor["architecture"], params, descriptor.get("meta", {}), version)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
