"""The "CESC" binary container used for effect caches and checkpoints.

Layout::

    b"CESC" | u16 version | u16 float width | u32 n | n bytes header JSON
    | matrix payloads (little-endian float64, row-major)
    | footer JSON index | u64 footer length | b"CESC"
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CESC"
FORMAT_VERSION = 1
FLOAT_WIDTH = 8
_HEAD = struct.Struct("<4sHHI")
_TAIL = struct.Struct("<Q4s")


class FormatError(ValueError):
    """A container file is truncated, corrupt or of another version."""


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: str | Path, matrices: Mapping[str, np.ndarray], header: Mapping) -> None:
    payload = bytearray()
    index = []
    for name in sorted(matrices):
        arr = np.ascontiguousarray(np.asarray(matrices[name], dtype="<f8"))
        index.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    head = _dumps(dict(header))
    footer = _dumps({"matrices": index, "payload_bytes": len(payload)})
    blob = (_HEAD.pack(MAGIC, FORMAT_VERSION, FLOAT_WIDTH, len(head)) + head + bytes(payload)
            + footer + _TAIL.pack(len(footer), MAGIC))
    Path(path).write_bytes(blob)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size + _TAIL.size:
        raise FormatError(f"{path}: truncated container ({len(blob)} bytes)")
    magic, version, width, head_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    if width != FLOAT_WIDTH:
        raise FormatError(f"{path}: float width {width} is not supported (expected {FLOAT_WIDTH})")
    footer_len, trailer = _TAIL.unpack_from(blob, len(blob) - _TAIL.size)
    if trailer != MAGIC:
        raise FormatError(f"{path}: truncated container (missing trailer)")
    data_start = _HEAD.size + head_len
    footer_start = len(blob) - _TAIL.size - footer_len
    if footer_start < data_start:
        raise FormatError(f"{path}: corrupt container (footer overlaps header)")
    try:
        header = json.loads(blob[_HEAD.size:data_start].decode("utf-8"))
        footer = json.loads(blob[footer_start:len(blob) - _TAIL.size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt container metadata ({exc})") from None
    if footer.get("payload_bytes") != footer_start - data_start:
        raise FormatError(f"{path}: payload size does not match index")
    matrices = {}
    for entry in footer["matrices"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        end = start + n * FLOAT_WIDTH
        if end > footer_start:
            raise FormatError(f"{path}: matrix {entry['name']} runs past the payload")
        matrices[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    return header, matrices
