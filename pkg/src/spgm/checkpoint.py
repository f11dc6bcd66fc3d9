"""Model checkpoint container.

Layout::

    SPGM-CHECKPOINT\\n
    <index byte length, decimal>\\n
    <index: UTF-8 JSON text>
    <payload: little-endian float32 tensors, back to back>

The index carries ``format_version``, the full model config and, per
parameter, its name, shape, dtype and byte offset into the payload.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from spgm.separator import ModelConfig, SeparatorModel
from spgm.tensor import Tensor

MAGIC = b"SPGM-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SeparatorModel) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in model.named_parameters():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32-le",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    index = json.dumps({"format_version": FORMAT_VERSION,
                        "config": model.config.to_dict(),
                        "tensors": entries}, indent=1).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(index)}\n".encode("ascii"))
        fh.write(index)
        for blob in blobs:
            fh.write(blob)


def read_index(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an SPGM checkpoint")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        n = int(rest[:nl])
        index = json.loads(rest[nl + 1:nl + 1 + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt index ({exc})") from exc
    if index.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {index.get('format_version')}")
    return index, rest[nl + 1 + n:]


def load_checkpoint(path) -> SeparatorModel:
    index, payload = read_index(path)
    config = ModelConfig.from_dict(index["config"])
    params = {}
    for e in index["tensors"]:
        if e["dtype"] != "float32-le":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']}")
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").astype(np.float64)
        params[e["name"]] = Tensor(arr.reshape(e["shape"]), requires_grad=True)
    return SeparatorModel(config, params)
