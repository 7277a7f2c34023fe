"""Checkpoint evaluation on test manifests, multi-run aggregation and the results table."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..audio_io import AudioError, load_canonical
from ..features import FeatureError
from ..models import predict
from .manifest import Manifest
from .metrics import UndefinedCorrelationError, pcc, srcc

log = logging.getLogger(__name__)

MAX_UNREADABLE_FRACTION = 0.05


class EvaluationError(RuntimeError):
    pass


class AggregationError(ValueError):
    pass


@dataclass
class DatasetResult:
    pcc: float | None
    srcc: float | None
    n_clips: int
    n_excluded: int = 0
    pcc_std: float = 0.0
    srcc_std: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetResult":
        return cls(**d)


@dataclass
class EvalReport:
    """Results per test dataset. ``runs`` keeps one row per contributing run."""

    datasets: dict
    seeds: list = field(default_factory=list)
    strategy: str = ""
    runs: list = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seeds": list(self.seeds),
            "datasets": {k: v.to_dict() for k, v in self.datasets.items()},
            "runs": [{k: v.to_dict() for k, v in run.items()} for run in self.runs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        load = lambda m: {k: DatasetResult.from_dict(v) for k, v in m.items()}
        return cls(load(d["datasets"]), list(d.get("seeds", [])), d.get("strategy", ""),
                   [load(r) for r in d.get("runs", [])])

    def save(self, path):
        with open(path, "w") as fh:
            # insertion order of datasets is the table's column order
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def evaluate_manifest(model, manifest: Manifest, strict: bool = True) -> DatasetResult:
    labels, preds, excluded = [], [], 0
    for record in manifest:
        if record.label is None:
            raise EvaluationError(f"{record.clip_path} has no label")
        try:
            score = predict(model, load_canonical(manifest.path_of(record))).score
        except (AudioError, FeatureError, OSError) as exc:
            log.warning("excluding %s: %s", record.clip_path, exc)
            excluded += 1
            continue
        labels.append(record.label)
        preds.append(score)
    n = len(manifest)
    try:
        if n == 0:
            raise EvaluationError("test manifest is empty")
        if excluded / n > MAX_UNREADABLE_FRACTION:
            raise EvaluationError(f"{excluded}/{n} clips unreadable (> 5%)")
        return DatasetResult(pcc(labels, preds), srcc(labels, preds), len(labels), excluded)
    except (EvaluationError, UndefinedCorrelationError) as exc:
        if strict:
            raise
        return DatasetResult(None, None, len(labels), excluded, error=f"{type(exc).__name__}: {exc}")


def evaluate(ckpt, test_manifests: dict, strict: bool = True, strategy: str = "") -> EvalReport:
    """Predict every clip (full length, eval mode, clamped mean) and correlate with labels.

    ``test_manifests`` maps a dataset name to its Manifest. With ``strict`` off,
    a failing dataset is recorded with its error instead of raising.
    """
    model = getattr(ckpt, "model", ckpt)
    results = {name: evaluate_manifest(model, m, strict) for name, m in test_manifests.items()}
    seed = getattr(ckpt, "seed", None)
    return EvalReport(results, [seed], strategy, [results])


def _sample_std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate_runs(reports, strategy: str | None = None) -> EvalReport:
    """Mean and sample standard deviation of every metric over runs."""
    reports = list(reports)
    if not reports:
        raise AggregationError("no reports to aggregate")
    names = list(reports[0].datasets)
    for r in reports[1:]:
        if set(r.datasets) != set(names):
            raise AggregationError(f"reports cover different test sets: {sorted(names)} vs {sorted(r.datasets)}")
    runs = [run for r in reports for run in (r.runs or [r.datasets])]
    seeds = [s for r in reports for s in r.seeds]
    out = {}
    for name in names:
        rows = [run[name] for run in runs]
        failed = [row.error for row in rows if row.error or row.pcc is None]
        if failed:
            raise AggregationError(f"{name}: cannot aggregate failed evaluations ({failed[0]})")
        p = [row.pcc for row in rows]
        s = [row.srcc for row in rows]
        out[name] = DatasetResult(float(np.mean(p)), float(np.mean(s)), rows[0].n_clips,
                                  rows[0].n_excluded, _sample_std(p), _sample_std(s))
    return EvalReport(out, seeds, reports[0].strategy if strategy is None else strategy, runs)


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def render_table(reports, metric: str = "pcc", title: str | None = None) -> str:
    """Fixed-width table: training strategies as rows, test datasets as columns.

    The best value in each column (compared at the printed two-decimal
    precision) is wrapped in ``**``; only exact ties share the mark.
    """
    reports = list(reports)
    columns = []
    for r in reports:
        columns += [c for c in r.datasets if c not in columns]
    cells, values = [], []
    for r in reports:
        row, vals = [], []
        for c in columns:
            res = r.datasets.get(c)
            mean = None if res is None else getattr(res, metric)
            if mean is None or (isinstance(mean, float) and math.isnan(mean)):
                row.append("n/a")
                vals.append(None)
            else:
                row.append(format_cell(mean, getattr(res, f"{metric}_std")))
                vals.append(round(mean, 2))
        cells.append(row)
        values.append(vals)
    for j in range(len(columns)):
        col = [v[j] for v in values if v[j] is not None]
        if not col:
            continue
        best = max(col)
        for i, v in enumerate(values):
            if v[j] == best:
                cells[i][j] = f"**{cells[i][j]}**"

    corner = ("Training data ↓ / Test data →")
    names = [r.strategy or f"run {i + 1}" for i, r in enumerate(reports)]
    first = max(len(corner), *(len(n) for n in names))
    widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(columns)]
    lines = []
    if title:
        lines.append(title)
    header = corner.ljust(first) + " | " + " | ".join(c.center(w) for c, w in zip(columns, widths))
    lines.append(header)
    lines.append("-" * len(header))
    for name, row in zip(names, cells):
        lines.append(name.ljust(first) + " | " + " | ".join(v.center(w) for v, w in zip(row, widths)))
    runs = ", ".join(f"{n}: {r.n_runs or 1}" for n, r in zip(names, reports))
    lines.append(f"{metric.upper()} mean ± sample std over runs ({runs})")
    return "\n".join(lines) + "\n"
