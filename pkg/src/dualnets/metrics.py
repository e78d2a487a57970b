"""Continual-learning metrics from the lower-triangular accuracy matrix.

a[i][j] is the accuracy on task j's validation data right after training on
task i (j <= i). With T tasks:

    ACC = mean_j a[T-1][j]                            final average accuracy
    FM  = mean_{j<T-1} [ max_{l<T-1, l>=j} a[l][j] - a[T-1][j] ]   forgetting
    BWT = mean_{j<T-1} [ a[T-1][j] - a[j][j] ]        backward transfer
    LA  = mean_i a[i][i]                              learning accuracy
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .engine import EngineError


class AccuracyMatrix:
    """Lower-triangular grid of per-task accuracies, row-complete."""

    def __init__(self, rows):
        self.rows = [list(map(float, r)) for r in rows]
        for i, row in enumerate(self.rows):
            if len(row) != i + 1:
                raise EngineError(f"row {i} must have {i + 1} entries, got {len(row)}")
            for v in row:
                if not (0.0 <= v <= 1.0):
                    raise EngineError(f"accuracy {v} outside [0, 1]")
        if not self.rows:
            raise EngineError("accuracy matrix needs at least one row")

    @property
    def n_tasks(self) -> int:
        return len(self.rows)

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]

    def to_array(self) -> np.ndarray:
        t = self.n_tasks
        out = np.full((t, t), np.nan)
        for i, row in enumerate(self.rows):
            out[i, : i + 1] = row
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["after_task"] + [f"task{j}" for j in range(self.n_tasks)])
        for i, row in enumerate(self.rows):
            writer.writerow([i] + [repr(v) for v in row] + [""] * (self.n_tasks - 1 - i))
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "AccuracyMatrix":
        rows = []
        for rec in csv.reader(io.StringIO(text)):
            if not rec or rec[0] == "after_task":
                continue
            i = int(rec[0])
            rows.append([float(v) for v in rec[1 : 2 + i]])
        return AccuracyMatrix(rows)


def acc(matrix: AccuracyMatrix) -> float:
    """Mean of the final row."""
    final = matrix.rows[-1]
    if len(final) != matrix.n_tasks:
        raise EngineError("final row incomplete")
    return float(np.mean(final))


def fm(matrix: AccuracyMatrix) -> float:
    """Forgetting: best earlier accuracy minus final accuracy, averaged."""
    t = matrix.n_tasks
    if t < 2:
        raise EngineError("forgetting is undefined for a single task")
    terms = []
    for j in range(t - 1):
        best = max(matrix.rows[l][j] for l in range(j, t - 1))
        terms.append(best - matrix.rows[t - 1][j])
    return float(np.mean(terms))


def bwt(matrix: AccuracyMatrix) -> float:
    """Backward transfer: final accuracy minus just-learned accuracy."""
    t = matrix.n_tasks
    if t < 2:
        raise EngineError("backward transfer is undefined for a single task")
    return float(np.mean([matrix.rows[t - 1][j] - matrix.rows[j][j] for j in range(t - 1)]))


def la(matrix: AccuracyMatrix) -> float:
    """Mean of the diagonal."""
    return float(np.mean([matrix.rows[i][i] for i in range(matrix.n_tasks)]))


def all_metrics(matrix: AccuracyMatrix) -> dict:
    out = {"acc": acc(matrix), "la": la(matrix)}
    if matrix.n_tasks >= 2:
        out["fm"] = fm(matrix)
        out["bwt"] = bwt(matrix)
    else:
        out["fm"] = float("nan")
        out["bwt"] = float("nan")
    return out


@dataclass
class MetricReport:
    """Per-seed metric values with mean and sample standard deviation."""

    method: str
    stream: str
    seeds: list
    per_seed: dict  # metric -> list of values

    def mean(self, key) -> float:
        return float(np.mean(self.per_seed[key]))

    def std(self, key) -> float:
        vals = self.per_seed[key]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def row(self) -> dict:
        out = {"method": self.method, "stream": self.stream, "n_seeds": len(self.seeds)}
        for key in ("acc", "fm", "bwt", "la"):
            out[f"{key}_mean"] = self.mean(key)
            out[f"{key}_std"] = self.std(key)
        return out


def aggregate(method, stream, seeds, metric_dicts) -> MetricReport:
    per_seed = {k: [m[k] for m in metric_dicts] for k in ("acc", "fm", "bwt", "la")}
    return MetricReport(method=method, stream=stream, seeds=list(seeds), per_seed=per_seed)


METRIC_CSV_COLUMNS = ["method", "stream", "seed", "acc", "fm", "bwt", "la"]


def metrics_csv(rows) -> str:
    """rows: iterable of dicts with METRIC_CSV_COLUMNS keys."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_CSV_COLUMNS)
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r[k] for k in METRIC_CSV_COLUMNS})
    return buf.getvalue()


def comparison_markdown(reports) -> str:
    """Side-by-side mean +- std table, sorted by mean ACC descending."""
    reports = sorted(reports, key=lambda r: -r.mean("acc"))
    lines = [
        "| method | stream | seeds | ACC | FM | BWT | LA |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        cells = [
            r.method,
            r.stream,
            str(len(r.seeds)),
        ] + [f"{r.mean(k):.4f} ± {r.std(k):.4f}" for k in ("acc", "fm", "bwt", "la")]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
