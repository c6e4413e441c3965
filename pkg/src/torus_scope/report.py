"""Deterministic CSV/JSON writers shared by the CLI and the library dumps."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1

__all__ = [
    "SCHEMA_VERSION",
    "format_float",
    "header_lines",
    "jsonable",
    "write_csv",
    "write_json",
]


def format_float(v) -> str:
    """17 significant digits; identical input always gives identical text."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def _tool_version() -> str:
    from . import __version__

    return __version__


def header_lines(meta: Mapping) -> list[str]:
    lines = [f"# torus-scope {_tool_version()}"]
    for key in sorted(meta):
        val = meta[key]
        if isinstance(val, Mapping):
            val = " ".join(f"{k}={_scalar(v)}" for k, v in sorted(val.items()))
        else:
            val = _scalar(val)
        lines.append(f"# {key}: {val}")
    return lines


def _scalar(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for line in header_lines(meta or {}):
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    return path


def _cell(v) -> str:
    if isinstance(v, (float, int, np.floating, np.integer)) and not isinstance(v, bool):
        return format_float(v)
    return str(v)


def jsonable(obj):
    """Convert numpy/complex/dataclass values into plain JSON types.

    Floats are emitted through :func:`format_float` round-tripping so the text
    is stable across platforms; complex numbers become ``{"re", "im"}``.
    """
    if is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(asdict(obj))
    if isinstance(obj, Mapping):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": jsonable(obj.real), "im": jsonable(obj.imag)}
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else format_float(v)
    return obj


def write_json(path, payload: Mapping, tolerances: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "tool_version": _tool_version()}
    if tolerances is not None:
        doc["tolerances"] = dict(tolerances)
    doc.update(payload)
    path.write_text(json.dumps(jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path
