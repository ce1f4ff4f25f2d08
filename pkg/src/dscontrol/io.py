"""DSC1 dataset files, sidecar metadata CSVs and atomic file writes.

Binary layout (little-endian):
    b"DSC1" | u16 version | u32 n, channels, rows, cols
    | float32 payload, row-major (n, channels, rows, cols)
    | n metadata records (see ``META_DTYPE``)
"""

from __future__ import annotations

import csv
import io as _io
import os
import struct
import tempfile
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"DSC1"
VERSION = 1
_HEADER = struct.Struct("<4sH4I")

META_DTYPE = np.dtype([
    ("uid", "<i8"), ("line", "<i4"), ("location", "<f8"), ("duration", "<f8"), ("k", "<f8"),
    ("tis", "<i4"), ("r", "<f8"), ("r_hat", "<f8"), ("dr_label", "<i4"),
])


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class RecordMeta:
    uid: int
    line: int  # -1 when no fault was applied
    location: float
    duration: float
    k: float
    tis: int
    r: float
    r_hat: float
    dr_label: int = -1

    @classmethod
    def from_window(cls, win, dr_label: int = -1) -> "RecordMeta":
        sc = win.scenario
        return cls(int(sc.uid), -1 if sc.line is None else int(sc.line), float(sc.location),
                   float(sc.duration), float(sc.k), int(win.tis), float(win.r), float(win.r_hat),
                   int(dr_label))


META_FIELDS = tuple(f.name for f in fields(RecordMeta))


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".csv")


def _meta_csv(meta) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(META_FIELDS)
    for m in meta:
        w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(m)])
    return buf.getvalue()


def write_dataset(path, data, meta) -> Path:
    """Write volumes (n, channels, rows, cols) plus per-record metadata."""
    data = np.asarray(data)
    if data.ndim != 4:
        raise ValueError("dataset payload must be 4-D (n, channels, rows, cols)")
    meta = list(meta)
    if len(meta) != data.shape[0]:
        raise ValueError(f"{len(meta)} metadata records for {data.shape[0]} volumes")
    table = np.array([astuple(m) for m in meta], dtype=META_DTYPE)
    blob = b"".join([
        _HEADER.pack(MAGIC, VERSION, *data.shape),
        np.ascontiguousarray(data, dtype="<f4").tobytes(),
        table.tobytes(),
    ])
    atomic_write(path, blob)
    atomic_write_text(sidecar_path(path), _meta_csv(meta))
    return Path(path)


def read_header(path) -> tuple[int, int, int, int]:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    return _parse_header(path, head)


def _parse_header(path, head):
    if len(head) < 4 or head[:4] != MAGIC:
        raise FormatError(f"{path}: not a DSC1 dataset (bad magic)")
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, n, c, r, w = _HEADER.unpack(head)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    return n, c, r, w


def read_dataset(path, check_sidecar: bool = True):
    """Returns (float32 array (n, channels, rows, cols), list of RecordMeta)."""
    path = Path(path)
    raw = path.read_bytes()
    n, c, r, w = _parse_header(path, raw[:_HEADER.size])
    n_payload = n * c * r * w * 4
    expected = _HEADER.size + n_payload + n * META_DTYPE.itemsize
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated ({len(raw)} bytes, header implies {expected})")
    if len(raw) > expected:
        raise FormatError(f"{path}: header count {n} does not match file size ({len(raw) - expected} extra bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=n * c * r * w, offset=_HEADER.size)
    data = data.reshape(n, c, r, w).astype(np.float32)
    table = np.frombuffer(raw, dtype=META_DTYPE, count=n, offset=_HEADER.size + n_payload)
    meta = [RecordMeta(*(v.item() for v in row)) for row in table]
    side = sidecar_path(path)
    if check_sidecar and side.exists():
        with open(side, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) - 1 != n:
            raise FormatError(f"{side}: {len(rows) - 1} metadata rows but header count is {n}")
    return data, meta
