"""Per-timestep metric CSVs, aggregate JSON and mask CSVs for explanation runs."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .. import __version__
from ..expmetrics import (
    CSV_COLUMNS,
    DIVERGENCE_DEFINITION,
    FIDELITY_DEFINITION,
    METRICS,
    ExplanationRecord,
    aggregate,
)

RECORDS_FILE = "records.csv"
AGGREGATE_FILE = "aggregate.json"
MASKS_FILE = "masks.csv"


class ReportError(RuntimeError):
    pass


def design_identifiers() -> dict[str, str]:
    return {
        "fidelity_definition": FIDELITY_DEFINITION,
        "divergence_definition": DIVERGENCE_DEFINITION,
        "complement": "one-minus-mask",
        "rollouts": "deterministic-mean-actions",
        "explainer_fit": "per-timestep",
    }


def records_csv(records: Iterable[ExplanationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def masks_csv(masks: Sequence[tuple[int, int, np.ndarray]]) -> str:
    """One row per timestep: episode, t, then mask entries in row-major order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = masks[0][2].shape[-1] if masks else 0
    w.writerow(["episode", "t"] + [f"m_{i}_{j}" for i in range(n) for j in range(n)])
    for ep, t, m in masks:
        w.writerow([ep, t] + [repr(float(v)) for v in np.ravel(m)])
    return buf.getvalue()


def aggregate_key(task: str, n_agents: int, regularized: bool, explainer: str) -> str:
    return f"{task}|{n_agents}|{int(regularized)}|{explainer}"


def aggregate_document(records: Sequence[ExplanationRecord], manifest: dict, failures: int = 0) -> dict:
    groups: dict[str, list[ExplanationRecord]] = {}
    for r in records:
        groups.setdefault(aggregate_key(r.task, r.n_agents, r.regularized, r.explainer), []).append(r)
    if not groups and manifest.get("key"):
        groups[manifest["key"]] = []
    aggregates = {}
    for key, recs in groups.items():
        agg = aggregate(recs)
        agg["records"] = len(recs)
        aggregates[key] = agg
    return {
        "manifest": {**manifest, "design": design_identifiers(), "version": __version__, "failures": failures},
        "columns": list(CSV_COLUMNS),
        "metrics": list(METRICS),
        "aggregates": aggregates,
    }


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror}") from None


def write_report(
    records: Sequence[ExplanationRecord],
    out_dir,
    manifest: dict,
    masks: Sequence[tuple[int, int, np.ndarray]] = (),
    failures: int = 0,
) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc.strerror}") from None
    paths = {"records": out / RECORDS_FILE, "aggregate": out / AGGREGATE_FILE, "masks": out / MASKS_FILE}
    _write(paths["records"], records_csv(records))
    doc = aggregate_document(records, manifest, failures)
    _write(paths["aggregate"], json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write(paths["masks"], masks_csv(masks))
    return paths


def read_metric_column(path, metric: str) -> list[float]:
    """Values of ``metric`` from a records CSV (or a directory containing one)."""
    p = Path(path)
    if p.is_dir():
        p = p / RECORDS_FILE
    try:
        with p.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or metric not in reader.fieldnames:
                raise ReportError(f"{p}: no column {metric!r}")
            return [float(row[metric]) for row in reader]
    except OSError as exc:
        raise ReportError(f"cannot read {p}: {exc.strerror}") from None
