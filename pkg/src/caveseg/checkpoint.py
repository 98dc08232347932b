"""Single-file checkpoints: config plus named float64 tensors.

Layout::

    8 bytes   magic  b"CAVESEG\\0"
    4 bytes   format version (uint32, little-endian)
    4 bytes   header length N (uint32, little-endian)
    N bytes   UTF-8 JSON header {"format_version", "config", "tensors": [{"name", "shape"}], "meta"}
    ...       raw little-endian float64 data of every tensor, in header order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError
from .model import CaveSegModel, ModelConfig, weight_shapes
from .tensor import Tensor

MAGIC = b"CAVESEG\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def encode_checkpoint(model: CaveSegModel, meta: Optional[dict] = None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in model.weights.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in model.weights.values())
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + body


def save_checkpoint(model: CaveSegModel, path: os.PathLike, meta: Optional[dict] = None) -> int:
    """Write atomically (temp file + rename); returns the byte size."""
    path = Path(path)
    blob = encode_checkpoint(model, meta)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return len(blob)


def decode_checkpoint(blob: bytes) -> tuple:
    """Parse a checkpoint blob into ``(model, meta)``; raises FormatError on any defect."""
    if len(blob) < _PREFIX.size:
        raise FormatError("checkpoint truncated before header")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}; not a CaveSeg checkpoint")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(blob) < start + head_len:
        raise FormatError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[start:start + head_len].decode())
        config = ModelConfig.from_dict(header["config"])
        entries = [(e["name"], tuple(int(s) for s in e["shape"])) for e in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != version:
        raise FormatError("header version disagrees with file prefix")
    if dict(entries) != weight_shapes(config):
        raise FormatError("tensor names/shapes do not match the stored model config")
    offset = start + head_len
    need = offset + 8 * sum(int(np.prod(s)) for _, s in entries)
    if len(blob) != need:
        raise FormatError(f"checkpoint has {len(blob)} bytes, expected {need} (truncated or padded)")
    weights = {}
    for name, shape in entries:
        n = int(np.prod(shape))
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        weights[name] = Tensor(data, requires_grad=True)
        offset += 8 * n
    return CaveSegModel(config, weights), header.get("meta", {})


def load_checkpoint(path: os.PathLike) -> CaveSegModel:
    return decode_checkpoint(Path(path).read_bytes())[0]


def read_meta(path: os.PathLike) -> dict:
    return decode_checkpoint(Path(path).read_bytes())[1]
