"""Byte-stable report writer (json, csv, text).

Floats are printed with 12 significant digits, keys are sorted and
wall-clock fields are left out unless asked for, so identical inputs give
identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import numbers
from pathlib import Path
from typing import Iterable, Optional

import jsonschema
import numpy as np

from ..errors import IoFailure

FORMATS = ("json", "csv", "text")
REPORT_VERSION = 1
FLOAT_DIGITS = 12

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "kind", "records"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": REPORT_VERSION},
        "kind": {"enum": ["suite", "bench", "reduce", "generic"]},
        "records": {"type": "array", "items": {"type": "object"}},
        "summary": {"type": "object"},
    },
}

SUITE_FIELDS = ("name", "cases", "passed_cases", "tol", "max_abs_err", "max_rel_err", "passed")
BENCH_FIELDS = ("strategy", "d_k", "d_h", "d_v", "N", "L", "repeats", "precision",
                "tps_mean", "tps_std", "tps_median")
KIND_FIELDS = {"suite": SUITE_FIELDS, "bench": BENCH_FIELDS}


def fmt_float(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, f".{FLOAT_DIGITS}g")


def _normalize(obj):
    """Plain JSON types with every float rounded to 12 significant digits."""
    if obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, numbers.Integral):
        return int(obj)
    if isinstance(obj, numbers.Real):
        x = float(obj)
        return float(fmt_float(x)) if math.isfinite(x) else fmt_float(x)
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _as_record(item, timing: bool) -> dict:
    if isinstance(item, dict):
        rec = dict(item)
    elif hasattr(item, "to_record"):
        try:
            rec = item.to_record(timing=timing)
        except TypeError:
            rec = item.to_record()
    elif hasattr(item, "to_dict"):
        rec = item.to_dict()
    else:
        raise TypeError(f"cannot report {type(item).__name__}")
    if not timing:
        rec.pop("wall_time", None)
    return rec


def _flatten(rec: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in rec.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, list):
            out[key] = json.dumps(v, sort_keys=True)
        else:
            out[key] = v
    return out


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt_float(v)
    if v is None:
        return ""
    return str(v)


def _columns(kind: str, flat: list) -> list:
    base = list(KIND_FIELDS.get(kind, ()))
    rest = sorted({k for r in flat for k in r} - set(base))
    return base + rest


def render(results: Iterable, fmt: str = "json", kind: str = "generic",
           summary: Optional[dict] = None, timing: bool = False) -> str:
    """The report as a string; see ``emit_report``."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    records = [_normalize(_as_record(r, timing)) for r in results]
    if fmt == "json":
        doc = {"version": REPORT_VERSION, "kind": kind, "records": records}
        if summary:
            doc["summary"] = _normalize(summary)
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    flat = [_flatten(r) for r in records]
    cols = _columns(kind, flat)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in flat:
            w.writerow([_cell(r.get(c)) for c in cols])
        return buf.getvalue()

    rows = [[_cell(r.get(c)) for c in cols] for r in flat]
    widths = [max([len(c)] + [len(row[i]) for row in rows]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)).rstrip() for row in rows]
    for k, v in sorted(_normalize(summary or {}).items()):
        lines.append(f"{k}: {_cell(v)}")
    return "\n".join(lines) + "\n"


def emit_report(results: Iterable, fmt: str = "json", path=None, kind: str = "generic",
                summary: Optional[dict] = None, timing: bool = False) -> str:
    """Render ``results`` and write them to ``path`` (if given); returns the text."""
    text = render(results, fmt, kind, summary, timing)
    if path is not None:
        write_text(path, text)
    return text


def write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write report to {path}: {exc}") from exc


def load_json_report(path) -> dict:
    """Read a json report back and validate it against REPORT_SCHEMA."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc
    jsonschema.validate(doc, REPORT_SCHEMA)
    return doc
