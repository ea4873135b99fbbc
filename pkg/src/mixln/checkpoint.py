"""Binary checkpoint format.

Layout, all integers unsigned 32-bit little-endian::

    b"MXLN" | version | n | n bytes of UTF-8 JSON | float32 LE parameters

The JSON document carries the model config and the active block list.
Parameters follow in ``parameter_layout`` order, each flattened row-major.
Weights are stored as float32, so a float64 model comes back rounded;
float32 models round-trip bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, parameter_layout
from .tensor import Tensor

MAGIC = b"MXLN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    doc = {"config": model.config.to_dict(), "active": model.active}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, _ in parameter_layout(model.config):
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())


def read_header(path) -> tuple[int, dict, int]:
    """Return ``(version, document, payload_offset)`` without reading weights."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} found, version {FORMAT_VERSION} supported")
    (n,) = struct.unpack_from("<I", raw, 8)
    if 12 + n > len(raw):
        raise CheckpointError(f"{path}: truncated config document")
    try:
        doc = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable config document ({exc})") from exc
    return version, doc, 12 + n


def load_checkpoint(path) -> Model:
    _, doc, offset = read_header(path)
    config = ModelConfig.from_dict(doc["config"])
    raw = Path(path).read_bytes()
    params = {}
    for name, shape in parameter_layout(config):
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(config.np_dtype), requires_grad=True)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Model(config, params, doc.get("active"))
