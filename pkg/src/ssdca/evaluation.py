"""Same-day aggregation, classification metrics, paired t-tests and robustness strata."""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .data import ARTIFACT_TAGS


@dataclass(frozen=True)
class PredictionRecord:
    patient_id: str
    group: str
    probability: float
    label: int
    artifacts: frozenset[str] = frozenset()

    def __post_init__(self):
        if not math.isfinite(self.probability):
            raise ValueError(f"non-finite probability for {self.patient_id}/{self.group}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class MetricsReport:
    balanced_accuracy: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return 100.0 * (self.tp + self.tn) / self.n if self.n else float("nan")

    def as_dict(self) -> dict[str, float]:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
        }


def topk_aggregate(group_probs: Sequence[float], k: int = 3, combiner: str = "mean") -> float:
    """Combine same-day probabilities through their ``k`` largest values.

    Groups smaller than ``k`` use every value.
    """
    if len(group_probs) == 0:
        raise ValueError("cannot aggregate an empty group")
    if k < 1:
        raise ValueError("k must be >= 1")
    top = sorted(group_probs, reverse=True)[:k]
    if combiner == "mean":
        return float(sum(top) / len(top))
    if combiner == "max":
        return float(top[0])
    raise ValueError(f"unknown combiner {combiner!r}")


def aggregate_records(records: Iterable[PredictionRecord], k: int = 3, combiner: str = "mean") -> list[PredictionRecord]:
    """One record per same-day group; artifact tags are the union over the group."""
    groups: dict[tuple[str, str], list[PredictionRecord]] = defaultdict(list)
    for r in records:
        groups[(r.patient_id, r.group)].append(r)
    out = []
    for (pid, grp), recs in sorted(groups.items()):
        labels = {r.label for r in recs}
        if len(labels) > 1:
            raise ValueError(f"group {pid}/{grp} mixes labels")
        prob = topk_aggregate([r.probability for r in recs], k, combiner)
        tags = frozenset().union(*(r.artifacts for r in recs))
        out.append(PredictionRecord(pid, grp, prob, recs[0].label, tags))
    return out


def confusion_counts(probs: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> tuple[int, int, int, int]:
    pred = np.asarray(probs) >= threshold
    lab = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    tn = int(np.sum(~pred & ~lab))
    fn = int(np.sum(~pred & lab))
    return tp, fp, tn, fn


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> MetricsReport:
    if tp + fn == 0 or tn + fp == 0:
        warnings.warn("only one class present; undefined rates reported as NaN", stacklevel=3)
    sens = 100.0 * tp / (tp + fn) if tp + fn else float("nan")
    spec = 100.0 * tn / (tn + fp) if tn + fp else float("nan")
    return MetricsReport((sens + spec) / 2.0, sens, spec, tp, fp, tn, fn)


def compute_metrics(records: Sequence[PredictionRecord], threshold: float = 0.5) -> MetricsReport:
    """Sensitivity/specificity/balanced accuracy in percent; regrowth (1) is positive."""
    probs = [r.probability for r in records]
    labels = [r.label for r in records]
    return metrics_from_counts(*confusion_counts(probs, labels, threshold))


@dataclass
class TTestResult:
    t: float
    dof: int
    p_two_sided: float
    ci95: tuple[float, float]
    mean_diff: float
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Classical paired t-test on d = a - b with a 95% CI for mean(d).

    Identical differences (zero variance) are flagged ``degenerate`` and get
    NaN statistics rather than a spurious p of 0 or 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    dof = n - 1
    if sd == 0.0:
        nan = float("nan")
        return TTestResult(nan, dof, nan, (mean, mean), mean, degenerate=True)
    se = sd / math.sqrt(n)
    t = mean / se
    p = float(2.0 * stats.t.sf(abs(t), dof))
    half = float(stats.t.ppf(0.975, dof)) * se
    return TTestResult(float(t), dof, p, (mean - half, mean + half), mean)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class RobustnessReport:
    strata: dict[str, MetricsReport]
    histograms: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    bin_edges: np.ndarray = field(default_factory=lambda: np.linspace(0, 1, 11))
    notes: list[str] = field(default_factory=list)


def robustness_report(
    records: Sequence[PredictionRecord], threshold: float = 0.5, bins: int = 10, include_clean: bool = True
) -> RobustnessReport:
    """Metrics and correct/incorrect probability histograms per artifact tag.

    A record carrying several tags is counted in each of them; ``clean``
    collects records without tags.
    """
    edges = np.linspace(0.0, 1.0, bins + 1)
    strata: dict[str, list[PredictionRecord]] = {t: [] for t in ARTIFACT_TAGS}
    if include_clean:
        strata["clean"] = []
    for r in records:
        for t in r.artifacts:
            strata.setdefault(t, []).append(r)
        if include_clean and not r.artifacts:
            strata["clean"].append(r)
    report = RobustnessReport({}, bin_edges=edges)
    for name, recs in strata.items():
        if not recs:
            report.notes.append(f"stratum {name} is empty; omitted")
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report.strata[name] = compute_metrics(recs, threshold)
        probs = np.array([r.probability for r in recs])
        correct = np.array([(r.probability >= threshold) == bool(r.label) for r in recs])
        report.histograms[name] = {
            "correct": np.histogram(probs[correct], bins=edges)[0],
            "incorrect": np.histogram(probs[~correct], bins=edges)[0],
        }
    return report


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}" if isinstance(x, float) else str(x)


def write_robustness_csv(report: RobustnessReport, metrics_path: str | Path, hist_path: str | Path) -> None:
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "n", "balanced_accuracy", "sensitivity", "specificity", "tp", "fp", "tn", "fn"])
        for name, m in report.strata.items():
            w.writerow([name, m.n, _fmt(m.balanced_accuracy), _fmt(m.sensitivity), _fmt(m.specificity),
                        m.tp, m.fp, m.tn, m.fn])
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "outcome", "bin_lo", "bin_hi", "count"])
        e = report.bin_edges
        for name, h in report.histograms.items():
            for outcome in ("correct", "incorrect"):
                for i, c in enumerate(h[outcome]):
                    w.writerow([name, outcome, f"{e[i]:.2f}", f"{e[i + 1]:.2f}", int(c)])


PREDICTION_FIELDS = ["patient_id", "group", "probability", "label", "artifacts"]


def write_predictions_csv(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_FIELDS)
        for r in records:
            w.writerow([r.patient_id, r.group, repr(float(r.probability)), r.label, ";".join(sorted(r.artifacts))])


def read_predictions_csv(path: str | Path) -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        PredictionRecord(
            row["patient_id"],
            row["group"],
            float(row["probability"]),
            int(row["label"]),
            frozenset(t for t in row["artifacts"].split(";") if t),
        )
        for row in rows
    ]


def write_metrics_csv(rows: Iterable[dict], path: str | Path) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
