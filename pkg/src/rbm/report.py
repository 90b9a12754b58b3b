"""Comparison tables and reward curves from metrics / evaluation CSVs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .training import METRICS_COLUMNS, METRICS_SCHEMA_VERSION

EVAL_SCHEMA_VERSION = 1
EVAL_COLUMNS = ["schema_version", "index", "input", "reference", "output",
                "rouge1", "rouge2", "rougeL", "bleu", "reward"]
TABLE_COLUMNS = ["model", "source", "n", "rouge1", "rouge2", "rougeL", "bleu", "reward"]
SERIES_COLUMNS = ["model", "phase", "step", "mean_raw_reward", "mean_rescaled_reward", "heldout_reward"]
_SCORES = ("rouge1", "rouge2", "rougeL", "bleu", "reward")


class SchemaError(ValueError):
    pass


@dataclass
class TableRow:
    model: str
    source: str       # "evaluation" (per-pair means) or "metrics" (last held-out evaluation)
    n: int
    rouge1: float
    rouge2: float
    rougeL: float
    bleu: float
    reward: float


def _read(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def _schema_check(path, header: list[str]) -> str:
    if header == EVAL_COLUMNS:
        return "evaluation"
    if header == METRICS_COLUMNS:
        return "metrics"
    ref = EVAL_COLUMNS if "index" in header else METRICS_COLUMNS
    missing = [c for c in ref if c not in header]
    extra = [c for c in header if c not in ref]
    moved = [] if missing or extra else [c for c, d in zip(header, ref) if c != d]
    raise SchemaError(f"{path}: schema mismatch; missing columns {missing}, unexpected columns {extra}"
                      + (f", out-of-order columns {moved}" if moved else ""))


def _f(v: str) -> float:
    return float(v) if v not in ("", None) else float("nan")


def table_row(path, model: str | None = None) -> tuple[TableRow, list[dict]]:
    """One comparison row per CSV plus its reward-curve series (metrics CSVs only)."""
    header, rows = _read(path)
    kind = _schema_check(path, header)
    model = model or Path(path).parent.name or Path(path).stem
    versions = {r["schema_version"] for r in rows}
    expected = str(EVAL_SCHEMA_VERSION if kind == "evaluation" else METRICS_SCHEMA_VERSION)
    if versions - {expected}:
        raise SchemaError(f"{path}: schema_version {sorted(versions)} (supported: {expected})")
    if kind == "evaluation":
        body = [r for r in rows if r["index"] != "MEAN"]
        means = {k: float(np.mean([_f(r[k]) for r in body])) if body else float("nan") for k in _SCORES}
        return TableRow(model, kind, len(body), **means), []
    held = [r for r in rows if r["heldout_rouge1"] != ""]
    last = held[-1] if held else {}
    row = TableRow(model, kind, len(rows), *(_f(last.get(k, "")) for k in
                                              ("heldout_rouge1", "heldout_rouge2", "heldout_rougeL",
                                               "heldout_bleu", "heldout_reward")))
    series = [{"model": model, "phase": r["phase"], "step": r["step"],
               "mean_raw_reward": r["mean_raw_reward"], "mean_rescaled_reward": r["mean_rescaled_reward"],
               "heldout_reward": r["heldout_reward"]}
              for r in rows if r["mean_raw_reward"] != "" or r["heldout_reward"] != ""]
    return row, series


def build_report(paths: Sequence, names: Sequence[str] | None = None) -> tuple[list[TableRow], list[dict]]:
    if not paths:
        raise ValueError("report needs at least one CSV")
    names = list(names) if names else [None] * len(paths)
    rows, series = [], []
    for p, n in zip(paths, names):
        r, s = table_row(p, n)
        rows.append(r)
        series.extend(s)
    return rows, series


def format_table(rows: Sequence[TableRow]) -> str:
    head = f"{'model':<24} {'source':<10} {'n':>6} {'ROUGE-1':>8} {'ROUGE-2':>8} {'ROUGE-L':>8} {'BLEU':>8} {'reward':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.model:<24} {r.source:<10} {r.n:>6} {100 * r.rouge1:8.2f} {100 * r.rouge2:8.2f} "
                     f"{100 * r.rougeL:8.2f} {100 * r.bleu:8.2f} {r.reward:8.4f}")
    return "\n".join(lines)


def write_report(rows: Sequence[TableRow], series: Sequence[dict], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, curves = out / "report.csv", out / "reward_curves.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r.model, r.source, r.n] + [repr(getattr(r, k)) for k in _SCORES])
    with open(curves, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SERIES_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(series)
    (out / "report.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
    return [table, curves, out / "report.txt"]
