"""Deterministic file writers shared by the CLI subcommands.

Floats are printed with 17 significant digits so every value round-trips
bit for bit; rows, columns and JSON keys have fixed order, newlines are
always ``\\n``.  Identical inputs therefore produce byte-identical files,
which the determinism contract of the runner depends on.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence


def fmt_float(x: float) -> str:
    """17-significant-digit decimal form; round-trips any double."""
    return f"{x:.17g}"


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return fmt_float(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def _jsonable(value):
    if isinstance(value, float):
        if math.isfinite(value):
            return value
        return {math.inf: "inf", -math.inf: "-inf"}.get(value, "nan")
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item") and not hasattr(value, "__len__"):  # numpy scalar
        return _jsonable(value.item())
    if hasattr(value, "tolist"):  # numpy array
        return _jsonable(value.tolist())
    return value


def write_jsonl(path: Path, records: Iterable[Mapping]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(_jsonable(rec), sort_keys=True, allow_nan=False))
            f.write("\n")
    return path


def write_text(path: Path, lines: Sequence[str]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
        f.write("\n")
    return path
