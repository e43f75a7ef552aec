"""Deterministic result files: summary tables, outcome quantiles, manifests.

All CSVs use ``.`` as decimal separator, a fixed column order and a fixed
number of decimals so that identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import platform
from importlib import metadata
from pathlib import Path

import numpy as np

FINANCE_COLUMNS = ("constraint_type", "strategy", "N", "mean", "constraint_value", "std",
                   "sharpe")
INSURANCE_COLUMNS = ("IF", "bounds", "policy", "set", "mean", "std", "dcvar", "var99")
QUANTILE_LEVELS = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)
DECIMALS = 6


def format_value(v) -> str:
    """Fixed-decimal text for floats, ``nan`` for undefined values."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        out = f"{float(v):.{DECIMALS}f}"
        # avoid a signed zero flipping between runs that round the same
        return out[1:] if out.startswith("-") and float(out) == 0.0 else out
    return str(v)


def write_table_csv(rows: list[dict], columns, path) -> None:
    """Write ``rows`` in ``columns`` order; an empty list yields a header-only file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            missing = [c for c in columns if c not in r]
            if missing:
                raise KeyError(f"row lacks columns {missing}")
            w.writerow([format_value(r[c]) for c in columns])


def read_table_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def quantile_rows(samples: dict[str, np.ndarray], levels=QUANTILE_LEVELS) -> list[dict]:
    """One row per (name, level) with the empirical outcome quantile."""
    rows = []
    for name in samples:
        x = np.asarray(samples[name], dtype=float)
        qs = np.quantile(x, levels, method="inverted_cdf")
        rows += [{"name": name, "level": lvl, "value": q} for lvl, q in zip(levels, qs)]
    return rows


def write_quantiles_csv(samples: dict[str, np.ndarray], path, levels=QUANTILE_LEVELS) -> None:
    write_table_csv(quantile_rows(samples, levels), ("name", "level", "value"), path)


def environment_versions() -> dict:
    names = ("numpy", "torch", "pydantic", "pyyaml", "click")
    out = {"python": platform.python_version()}
    for n in names:
        try:
            out[n] = metadata.version(n)
        except metadata.PackageNotFoundError:
            out[n] = "unknown"
    return out


def write_manifest(path, config: dict, config_hash: str, seeds: dict, files, extra=None) -> None:
    """JSON manifest tying outputs to the resolved config and library versions."""
    doc = {"config_hash": config_hash, "seeds": seeds, "config": config,
           "versions": environment_versions(), "files": sorted(files)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def format_table(columns, rows: list[dict]) -> str:
    """Plain aligned text table for terminal output."""
    cells = [list(columns)] + [[format_value(r.get(c, "")) if not isinstance(r.get(c), str)
                                else r[c] for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def emit_report(results_csv, out=None) -> str:
    """Render a results CSV as a text table; also write it to ``out`` if given."""
    columns, rows = read_table_csv(results_csv)
    if not columns:
        raise ValueError(f"{results_csv} has no header")
    text = format_table(columns, rows)
    if out is not None:
        Path(out).write_text(text + "\n")
    return text
