"""The ``SERF`` binary tensor container shared by checkpoints and feature files.

Layout (all integers little-endian)::

    b"SERF" | uint32 format_version | uint64 header_len | header (UTF-8 JSON) | payload

The header's ``tensors`` list holds ``{name, shape, offset}`` entries; each
tensor is a row-major float32 buffer at ``offset`` bytes into the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError, VersionError

MAGIC = b"SERF"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def encode(header: dict, tensors: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    body = json.dumps({**header, "tensors": directory}, sort_keys=True, separators=(",", ":"))
    head = body.encode("utf-8")
    return _PREFIX.pack(MAGIC, version, len(head)) + head + b"".join(chunks)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise ParseError("file too short for a SERF header")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"container format_version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if start + head_len > len(data):
        raise ParseError("truncated header")
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt header: {exc}") from None
    payload = memoryview(data)[start + head_len:]
    tensors = {}
    for entry in header.pop("tensors", []):
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"bad tensor directory entry {entry!r}") from None
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if offset < 0 or end > len(payload):
            raise ParseError(f"tensor {name!r} runs past the end of the file")
        tensors[name] = np.frombuffer(payload[offset:end], dtype="<f4").astype(np.float32).reshape(shape)
    return header, tensors


def write(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, tensors))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
