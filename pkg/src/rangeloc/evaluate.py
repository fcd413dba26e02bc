"""Metrics and reports: RMSE over test samples, error distributions, and
cross-method / ablation comparison tables.

Error convention: the per-sample error is the 3-D Euclidean position error
per tag, averaged over tags; RMSE is the root of the mean squared per-sample
error. Evaluation is always against true ground truth, also for models that
were trained on map-consistent (biased) labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TrajectoryEstimate",
    "MetricReport",
    "ComparisonTable",
    "rmse",
    "per_axis_rmse",
    "error_samples",
    "error_distribution",
    "build_report",
    "compare_methods",
    "ablation_report",
    "write_long_format_csv",
]

QUANTILES = (5, 25, 50, 75, 95)
THRESHOLDS_M = (1.0, 2.0, 3.0, 5.0, 10.0)


@dataclass
class TrajectoryEstimate:
    """Per-frame predicted tag positions for one trial."""

    trial_id: str
    method: str
    stamps: np.ndarray
    positions: np.ndarray  # (n, n_tags, 3), meters
    config_hash: str = ""

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim == 2:
            self.positions = self.positions.reshape(len(self.stamps), -1, 3)
        if np.any(np.diff(self.stamps) < 0):
            raise ValueError("estimate stamps must be sorted")
        if self.positions.shape[0] != len(self.stamps):
            raise ValueError("positions/stamps length mismatch")


def _as_tagged(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        a = a.reshape(a.shape[0], -1, 3)
    return a


def error_samples(predictions, references) -> np.ndarray:
    """Per-sample error: Euclidean norm per tag, averaged over tags."""
    p = _as_tagged(predictions)
    r = _as_tagged(references)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape} vs references {r.shape}")
    if p.shape[0] == 0:
        raise ValueError("no samples")
    return np.linalg.norm(p - r, axis=2).mean(axis=1)


def rmse(predictions, references) -> float:
    """Root mean square of the per-sample errors, meters."""
    e = error_samples(predictions, references)
    return float(np.sqrt(np.mean(e**2)))


def per_axis_rmse(predictions, references) -> np.ndarray:
    """RMSE per world axis, pooled over samples and tags."""
    p = _as_tagged(predictions)
    r = _as_tagged(references)
    return np.sqrt(np.mean((p - r) ** 2, axis=(0, 1)))


def error_distribution(errors: np.ndarray) -> tuple[dict[str, float], dict[str, float]]:
    """Quantiles (by exact sorting with linear interpolation) and the
    fraction of samples below each fixed threshold."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("no samples")
    qs = {f"q{q:02d}": float(np.percentile(errors, q)) for q in QUANTILES}
    frac = {f"below_{t:g}m": float(np.mean(errors < t)) for t in THRESHOLDS_M}
    return qs, frac


@dataclass
class MetricReport:
    method: str
    per_trial_rmse: dict[str, float]
    overall_rmse: float
    per_axis: list[float]
    quantiles: dict[str, float]
    frac_below: dict[str, float]
    mean_error: float
    repeats_averaged: int = 1
    reference: str = "ground_truth"
    config_hash: str = ""

    def __post_init__(self):
        if self.overall_rmse < 0 or any(v < 0 for v in self.per_trial_rmse.values()):
            raise ValueError("RMSE must be >= 0")
        q = [self.quantiles[f"q{v:02d}"] for v in QUANTILES if f"q{v:02d}" in self.quantiles]
        if any(b < a for a, b in zip(q, q[1:])):
            raise ValueError("quantiles must be monotone")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "MetricReport":
        return cls(**json.loads(blob))


def build_report(
    method: str,
    trials: dict[str, tuple[np.ndarray, np.ndarray]],
    repeats_averaged: int = 1,
    config_hash: str = "",
) -> MetricReport:
    """Aggregate a method's (prediction, reference) pairs per trial into one
    report; distribution statistics pool all trials."""
    per_trial = {}
    errs = []
    sq = []
    for trial_id, (pred, ref) in trials.items():
        e = error_samples(pred, ref)
        per_trial[trial_id] = float(np.sqrt(np.mean(e**2)))
        errs.append(e)
        sq.append((_as_tagged(pred) - _as_tagged(ref)) ** 2)
    pooled = np.concatenate(errs)
    qs, frac = error_distribution(pooled)
    axis = np.sqrt(np.concatenate([s.reshape(-1, 3) for s in sq], axis=0).mean(axis=0))
    return MetricReport(
        method=method,
        per_trial_rmse=per_trial,
        overall_rmse=float(np.sqrt(np.mean(pooled**2))),
        per_axis=[float(v) for v in axis],
        quantiles=qs,
        frac_below=frac,
        mean_error=float(pooled.mean()),
        repeats_averaged=repeats_averaged,
        config_hash=config_hash,
    )


def build_report_multi(
    method: str,
    repeat_trials: list[dict[str, tuple[np.ndarray, np.ndarray]]],
    config_hash: str = "",
) -> MetricReport:
    """Aggregate over training repeats: per-trial RMSE is the mean of the
    per-repeat RMSEs; distribution statistics pool the samples of every
    repeat."""
    if not repeat_trials:
        raise ValueError("no repeats")
    trial_ids = sorted(repeat_trials[0])
    per_trial = {
        t: float(np.mean([
            np.sqrt(np.mean(error_samples(*rep[t]) ** 2)) for rep in repeat_trials
        ]))
        for t in trial_ids
    }
    pooled = np.concatenate(
        [error_samples(*rep[t]) for rep in repeat_trials for t in trial_ids]
    )
    sq = np.concatenate(
        [
            ((_as_tagged(rep[t][0]) - _as_tagged(rep[t][1])) ** 2).reshape(-1, 3)
            for rep in repeat_trials
            for t in trial_ids
        ],
        axis=0,
    )
    qs, frac = error_distribution(pooled)
    return MetricReport(
        method=method,
        per_trial_rmse=per_trial,
        overall_rmse=float(np.sqrt(np.mean(pooled**2))),
        per_axis=[float(v) for v in np.sqrt(sq.mean(axis=0))],
        quantiles=qs,
        frac_below=frac,
        mean_error=float(pooled.mean()),
        repeats_averaged=len(repeat_trials),
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    methods: list[str]
    trial_ids: list[str]
    values: np.ndarray  # (n_trials, n_methods) RMSE
    best: list[str] = field(default_factory=list)  # best method per trial
    second: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["trial," + ",".join(self.methods) + ",best"]
        for i, t in enumerate(self.trial_ids):
            row = [t] + ["%.6g" % v for v in self.values[i]] + [self.best[i]]
            lines.append(",".join(row))
        mean = self.values.mean(axis=0)
        lines.append("mean," + ",".join("%.6g" % v for v in mean)
                     + "," + self.methods[int(np.argmin(mean))])
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        w = max(10, max(len(m) for m in self.methods) + 3)
        head = "trial".ljust(14) + "".join(m.rjust(w) for m in self.methods)
        lines = [head, "-" * len(head)]
        for i, t in enumerate(self.trial_ids):
            cells = []
            for j, m in enumerate(self.methods):
                v = "%.3f" % self.values[i, j]
                if m == self.best[i]:
                    v = "*" + v
                elif len(self.methods) > 1 and m == self.second[i]:
                    v = "_" + v
                cells.append(v.rjust(w))
            lines.append(t.ljust(14) + "".join(cells))
        mean = self.values.mean(axis=0)
        lines.append("mean".ljust(14) + "".join(("%.3f" % v).rjust(w) for v in mean))
        lines.append("(* best, _ second best per trial)")
        return "\n".join(lines) + "\n"


def compare_methods(reports: list[MetricReport]) -> ComparisonTable:
    """Per-trial rows, per-method columns; rejects mismatched trial sets."""
    if not reports:
        raise ValueError("no reports")
    trial_sets = [set(r.per_trial_rmse) for r in reports]
    if any(s != trial_sets[0] for s in trial_sets[1:]):
        raise ValueError(
            f"trial-set mismatch across methods: {[sorted(s) for s in trial_sets]}"
        )
    trial_ids = sorted(trial_sets[0])
    methods = [r.method for r in reports]
    values = np.array([[r.per_trial_rmse[t] for r in reports] for t in trial_ids])
    best, second = [], []
    for row in values:
        order = np.argsort(row)
        best.append(methods[int(order[0])])
        second.append(methods[int(order[1])] if len(methods) > 1 else "")
    return ComparisonTable(methods, trial_ids, values, best, second)


def ablation_report(runs: list[dict]) -> dict:
    """Group RMSE means over the (labels in {gt, osl}) x (tags in {1, 2}) x
    model grid. Missing cells are listed, not fatal."""
    cells: dict[tuple[str, int, str], list[float]] = {}
    models = sorted({r["model"] for r in runs})
    for r in runs:
        key = (r["labels"], int(r["tags"]), r["model"])
        cells.setdefault(key, []).append(float(r["rmse"]))
    rows = []
    missing = []
    for model in models:
        for labels in ("gt", "osl"):
            for tags in (1, 2):
                key = (labels, tags, model)
                if key in cells:
                    rows.append(
                        {
                            "model": model,
                            "labels": labels,
                            "tags": tags,
                            "rmse_mean": float(np.mean(cells[key])),
                            "runs": len(cells[key]),
                        }
                    )
                else:
                    missing.append({"model": model, "labels": labels, "tags": tags})
    return {"rows": rows, "missing": missing}


def write_long_format_csv(path: str | Path, estimates: list[tuple[str, str, np.ndarray]]):
    """Plot-ready long format: one row per (trial, method, sample, error)."""
    with open(path, "w", newline="") as f:
        f.write("trial,method,sample,error\n")
        for trial_id, method, errors in estimates:
            for i, e in enumerate(errors):
                f.write(f"{trial_id},{method},{i},{e:.9g}\n")
