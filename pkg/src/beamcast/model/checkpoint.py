"""BEAMENC1 checkpoint files.

Layout, little-endian: magic "BEAMENC1", u32 JSON length, UTF-8 JSON
(model config, scalings, tensor names, caller metadata), then every
parameter tensor in declaration order as u32 ndim, u32 dims, f64 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderModel, ModelConfig, parameter_shapes

MAGIC = b"BEAMENC1"
_U32 = struct.Struct("<I")


def save_checkpoint(model: EncoderModel, path, meta: dict | None = None) -> None:
    names = list(parameter_shapes(model.cfg))
    header = {
        "model": model.cfg.to_dict(),
        "input_scale": model.input_scale,
        "target_scale": model.target_scale,
        "tensors": names,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(len(blob)))
        fh.write(blob)
        for name in names:
            t = model.params[name]
            fh.write(_U32.pack(t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EncoderModel, dict]:
    """Return the model and the caller metadata stored with it."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    (n,) = _U32.unpack_from(data, 8)
    header = json.loads(data[12:12 + n].decode())
    cfg = ModelConfig.from_dict(header["model"])
    shapes = parameter_shapes(cfg)
    if header["tensors"] != list(shapes):
        raise ValueError(f"{path}: tensor list does not match the model config")
    off = 12 + n
    params = {}
    for name in header["tensors"]:
        if off + 4 > len(data):
            raise ValueError(f"{path}: truncated before tensor {name} at offset {off}")
        (ndim,) = _U32.unpack_from(data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        if shape != shapes[name]:
            raise ValueError(f"{path}: tensor {name} has shape {shape}, expected {shapes[name]}")
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise ValueError(f"{path}: truncated inside tensor {name} at offset {off}")
        params[name] = np.frombuffer(data, "<f8", count, off).reshape(shape).copy()
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after the last tensor")
    model = EncoderModel(cfg, params, header["input_scale"], header["target_scale"])
    return model, header["meta"]
