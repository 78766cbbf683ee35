"""Versioned binary checkpoints, bit-exact across save/load cycles.

Layout (little-endian):
    magic   4 bytes  b"LMOE"
    version u32      currently 1
    hlen    u64      byte length of the JSON header
    header  hlen bytes of canonical JSON (sorted keys, no whitespace)
    payload concatenated float64 parameter blobs, row-major, in the
            header's ``params`` order

The header carries the model kind, config, language groups, expansion
history, classifier layers, and each parameter's name and shape.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..numerics import Tensor
from .config import ModelConfig
from .network import DenseModel, Expansion, Model, MoEModel

MAGIC = b"LMOE"
VERSION = 1


def _header(model: Model) -> dict:
    names = sorted(model.params)
    header = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
    }
    if isinstance(model, MoEModel):
        header["base_groups"] = list(model.base_groups)
        header["expansion_history"] = [
            [e.group, list(e.new_experts)] for e in model.expansion_history
        ]
        header["classifier_layers"] = list(model.classifier_layers)
    else:
        header["groups"] = list(model.groups)
    return header


def save_model(model: Model, path: str | Path) -> None:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(model.params):
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())


def load_model(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc

    expected = sum(
        int(np.prod(entry["shape"], dtype=np.int64)) for entry in header["params"]
    )
    payload = raw[16 + hlen :]
    if len(payload) != expected * 8:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected * 8}"
        )

    params: dict[str, Tensor] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        block = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8)
        offset += count
        data = block.astype(np.float64).reshape(shape)
        if not np.isfinite(data).all():
            raise FormatError(f"{path}: non-finite values in parameter {entry['name']}")
        params[entry["name"]] = Tensor(data)

    config = ModelConfig.from_dict(header["config"])
    if header["kind"] == "dense":
        return DenseModel(config, params, header.get("groups", ()))
    if header["kind"] == "moe":
        history = [Expansion(g, tuple(c)) for g, c in header.get("expansion_history", [])]
        return MoEModel(
            config,
            params,
            header.get("base_groups", ()),
            history,
            header.get("classifier_layers", ()),
        )
    raise FormatError(f"{path}: unknown model kind {header['kind']!r}")
