"""Versioned binary model checkpoints.

Layout: b"DSCM", u16 version, u32 header length, UTF-8 JSON header, then every
array listed in the header as little-endian float64, in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..encoding import NormStats
from ..io import atomic_write, FormatError
from .model import CnnAttConfig, CnnAttModel, RegressorConfig, RegressorModel

MAGIC = b"DSCM"
VERSION = 1


def save_checkpoint(path, model, stats: NormStats | None = None, extra: dict | None = None) -> None:
    if isinstance(model, CnnAttModel):
        kind, cfg = "cnn_att", model.cfg.to_dict()
    elif isinstance(model, RegressorModel):
        kind, cfg = "regressor", model.cfg.to_dict()
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    arrays = dict(model.params())
    if isinstance(model, RegressorModel):
        arrays["x_mean"] = model.x_mean
        arrays["x_scale"] = model.x_scale
    if stats is not None:
        arrays["stats.row_min"] = stats.row_min
        arrays["stats.row_max"] = stats.row_max
    header = dict(kind=kind, config=cfg, extra=extra or {},
                  arrays=[[name, list(np.shape(a))] for name, a in arrays.items()])
    hb = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(hb)), hb]
    chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values()]
    atomic_write(path, b"".join(chunks))


def load_checkpoint(path):
    """Returns (model, stats or None, extra dict)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    off = 10 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(raw):
            raise FormatError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    if header["kind"] == "cnn_att":
        model = CnnAttModel(CnnAttConfig.from_dict(header["config"]))
    else:
        model = RegressorModel(RegressorConfig.from_dict(header["config"]))
        model.x_mean = arrays.pop("x_mean").copy()
        model.x_scale = arrays.pop("x_scale").copy()
    stats = None
    if "stats.row_min" in arrays:
        stats = NormStats(arrays.pop("stats.row_min").copy(), arrays.pop("stats.row_max").copy())
    model.set_params(arrays)
    return model, stats, header.get("extra", {})
