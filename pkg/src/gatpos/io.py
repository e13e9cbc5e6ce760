"""Run artifacts: parameter dumps, deterministic JSON and loss-curve CSV.

``params.bin`` layout (all integers little-endian u32)::

    b"GPOS" | version | array count
    per array: name length | name (utf-8) | ndim | dims... | float64 data (C order, little-endian)
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import DatasetFormatError

MAGIC = b"GPOS"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def write_params(params: dict, path) -> Path:
    """Dump named float64 arrays, sorted by name so the bytes are reproducible."""
    path = Path(path)
    chunks = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(d) for d in arr.shape]
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def read_params(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetFormatError(f"{path}: truncated parameter file at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    def u32():
        return _U32.unpack(take(4))[0]

    if take(4) != MAGIC:
        raise DatasetFormatError(f"{path}: not a parameter dump (bad magic)")
    version = u32()
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    params = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return params


def dumps_json(obj) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj), encoding="utf-8")
    return path


LOSS_COLUMNS = ("epoch", "supervised", "unsupervised", "val_acc")


def write_loss_curve(history, path) -> Path:
    """Per-epoch ``epoch,supervised,unsupervised,val_acc`` rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]])
    return path
