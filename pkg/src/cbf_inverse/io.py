"""File helpers: atomic writes, round-trip float formatting, time-series CSV."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .fields import TimeSeries

FORMAT_VERSION = "1.0"


def format_float(x: float) -> str:
    """17 significant digits, enough to round-trip any float64."""
    return f"{float(x):.17g}"


def atomic_write_bytes(path, data: bytes) -> Path:
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
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload: dict) -> Path:
    """Deterministic JSON (sorted keys, fixed indentation)."""
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    return atomic_write_text(path, text + "\n")


def write_csv(path, header, rows) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def write_timeseries_csv(path, ts: TimeSeries, value_name: str = "value") -> Path:
    return write_csv(path, ["t", value_name], zip(ts.times.tolist(), ts.samples.tolist()))


def read_timeseries_csv(path) -> TimeSeries:
    """Read a two-column ``t,value`` file with uniform steps.

    Leading ``#`` lines are ignored; the first remaining line is the header.
    """
    with open(path, encoding="utf-8") as fh:
        body = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise ValueError(f"{path}: no data")
    arr = np.loadtxt(body[1:], delimiter=",", ndmin=2)
    if arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError(f"{path}: expected two columns and at least two rows")
    t = arr[:, 0]
    dt = (t[-1] - t[0]) / (len(t) - 1)
    if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=1e-12):
        raise ValueError(f"{path}: samples are not uniformly spaced")
    return TimeSeries(float(t[0]), float(dt), arr[:, 1])
