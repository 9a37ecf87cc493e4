"""Binary tensor container used for checkpoints, corpus records and feature files.

Layout::

    b"BNFS2ST\\x01" | uint32 LE header length | UTF-8 JSON header | payload

The payload is the concatenation of raw little-endian float64 arrays; the
header's tensor directory gives name, shape, byte offset and byte length of
each one, plus a SHA-256 of the whole payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError

MAGIC = b"BNFS2ST\x01"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def encode(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64), dtype=_LE_F64)
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(meta or {})
    header.setdefault("version", FORMAT_VERSION)
    header["tensors"] = directory
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + payload


def decode(data: bytes, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise CheckpointError("integrity error: truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"integrity error: unreadable header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {header.get('version')!r}")
    payload = data[start + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"integrity error: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}"
        )
    if verify and hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("integrity error: payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        shape, off, length = tuple(entry["shape"]), entry["offset"], entry["length"]
        if length != 8 * int(np.prod(shape, dtype=np.int64)) or off + length > len(payload):
            raise CheckpointError(f"integrity error: bad bookkeeping for tensor {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=_LE_F64, count=length // 8, offset=off)
        tensors[entry["name"]] = arr.astype(np.float64).reshape(shape)
    return tensors, header


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)


def load(path: str | os.PathLike, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes(), verify=verify)
