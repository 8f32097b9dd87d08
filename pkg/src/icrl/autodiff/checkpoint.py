"""Checkpoint container: ``ICKP`` v1, JSON header, raw little-endian f32 tensors, CRC32."""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..errors import FormatError

MAGIC = b"ICKP"
VERSION = 1


def dumps_checkpoint(tensors: dict, config: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "tensors": table}, sort_keys=True, separators=(",", ":")).encode()
    body = struct.pack("<I", len(header)) + header + b"".join(chunks)
    return MAGIC + struct.pack("<B", VERSION) + body + struct.pack("<I", zlib.crc32(body))


def loads_checkpoint(blob: bytes) -> tuple[dict, dict]:
    """Return ``(config, tensors)``."""
    if blob[:4] != MAGIC:
        raise FormatError("bad magic, not an ICKP checkpoint", 0)
    if len(blob) < 13 or blob[4] != VERSION:
        raise FormatError("unsupported version or truncated header", 4)
    body = blob[5:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch", len(blob) - 4)
    (hlen,) = struct.unpack("<I", body[:4])
    if 4 + hlen > len(body):
        raise FormatError("truncated header", 9)
    header = json.loads(body[4 : 4 + hlen].decode())
    payload = body[4 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FormatError(f"tensor {entry['name']} runs past the payload", 9 + hlen + start)
        arr = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return header["config"], tensors


def save_checkpoint(path, tensors: dict, config: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(tensors, config))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
