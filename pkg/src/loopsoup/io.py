"""On-disk formats: loop records, soup directories, CSV and JSON results.

Every writer goes through :func:`atomic_write` (temporary file in the target
directory, then ``os.replace``) so readers never see a torn file.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .paths import Loop, OpenPath

SOUP_SCHEMA = "loopsoup.soup/1"
_HEADER = struct.Struct("<Id")


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def path_to_bytes(p: OpenPath) -> bytes:
    """Little-endian record: u32 step count, f64 duration, then (time, coords) rows."""
    body = np.column_stack([p.times, p.points]).astype("<f8")
    return _HEADER.pack(p.steps, p.duration) + body.tobytes()


def path_from_bytes(buf: bytes, dim: int = 3, offset: int = 0, closed: bool = True):
    """Decode one record starting at ``offset``; returns ``(path, next_offset)``."""
    m, _ = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    n = (m + 1) * (1 + dim)
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(m + 1, 1 + dim)
    cls = Loop if closed else OpenPath
    return cls(arr[:, 0].copy(), arr[:, 1:].copy()), offset + 8 * n


def path_sidecar(p: OpenPath) -> dict:
    lo, hi = p.bbox
    return {
        "kind": "loop" if isinstance(p, Loop) else "path",
        "dim": p.dim,
        "steps": p.steps,
        "duration": p.duration,
        "diameter": p.diameter,
        "bbox": [lo.tolist(), hi.tolist()],
        "root": p.points[0].tolist(),
    }


def save_loops(path, loops) -> None:
    atomic_write(path, b"".join(path_to_bytes(lp) for lp in loops))


def load_loops(path, dim: int = 3) -> list[Loop]:
    buf = Path(path).read_bytes()
    out, off = [], 0
    while off < len(buf):
        lp, off = path_from_bytes(buf, dim, off)
        out.append(lp)
    return out


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def dumps_json(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write(path, dumps_json(obj))


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: list[str], rows) -> Path:
    """RFC-4180 CSV (CRLF line ends, minimal quoting); floats use ``repr`` for exact round trips."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for row in rows:
        vals = [row[c] for c in columns] if isinstance(row, dict) else list(row)
        w.writerow([format_value(v) for v in vals])
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
