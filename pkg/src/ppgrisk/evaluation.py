"""Hourly-alarm evaluation protocol and exact rank metrics.

AUROC uses the tie-aware pair statistic (ties credited 0.5); AUPRC is
average precision with tied score blocks grouped. Every test patient is
scored once per evaluation hour T-24 .. T-1; the report carries per-hour
values, window means (all / last 12 h / last 6 h), and pooled ROC points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .segmentation import eval_hours, eval_windows


def auroc(scores, labels) -> float:
    """(#concordant + 0.5 * #tied) / (P * N) via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    p = int(pos.sum())
    n = len(labels) - p
    if p == 0 or n == 0:
        raise DataError("auroc undefined: both classes required")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - p * (p + 1) / 2.0) / (p * n))


def auprc(scores, labels) -> float:
    """Average precision, descending-score order, tied blocks grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = int((labels == 1).sum())
    if p == 0:
        raise DataError("auprc undefined: no positives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = (labels[order] == 1).astype(np.float64)
    block_end = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(y)[block_end]
    total = block_end + 1.0
    precision = tp / total
    delta_tp = np.diff(np.concatenate([[0.0], tp]))
    return float((delta_tp * precision).sum() / p)


def roc_points(scores, labels) -> np.ndarray:
    """Tie-grouped ROC curve: rows (fpr, tpr, threshold), (0,0,inf) first,
    (1,1,min score) last; fpr and tpr non-decreasing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    p = int(pos.sum())
    n = len(labels) - p
    if p == 0 or n == 0:
        raise DataError("roc undefined: both classes required")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = pos[order].astype(np.float64)
    block_end = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(y)[block_end]
    fp = block_end + 1.0 - tp
    points = np.column_stack([fp / n, tp / p, s[block_end]])
    first = np.array([[0.0, 0.0, np.inf]])
    return np.vstack([first, points])


@dataclass
class HourEntry:
    hour: int          # hours before the event, 24 .. 1
    auroc: float
    auprc: float
    n_case: int
    n_control: int


@dataclass
class EvalReport:
    per_hour: list[HourEntry]
    mean_auroc_all: float
    mean_auroc_last12: float
    mean_auroc_last6: float
    mean_auprc_all: float
    mean_auprc_last12: float
    mean_auprc_last6: float
    roc: np.ndarray = field(repr=False)
    prevalence: float = 0.0


def _window_means(entries: list[HourEntry], attr: str) -> tuple[float, float, float]:
    vals = {e.hour: getattr(e, attr) for e in entries}
    mean_all = float(np.mean([vals[h] for h in vals]))
    last12 = float(np.mean([vals[h] for h in vals if h <= 12]))
    last6 = float(np.mean([vals[h] for h in vals if h <= 6]))
    return mean_all, last12, last6


def build_report(hour_scores: dict[int, np.ndarray], labels: np.ndarray) -> EvalReport:
    """Assemble the report from per-hour score vectors over one label set."""
    labels = np.asarray(labels)
    n_case = int((labels == 1).sum())
    n_control = int((labels == 0).sum())
    entries = [HourEntry(hour, auroc(hour_scores[hour], labels),
                         auprc(hour_scores[hour], labels), n_case, n_control)
               for hour in eval_hours()]
    pooled_scores = np.concatenate([hour_scores[h] for h in eval_hours()])
    pooled_labels = np.concatenate([labels] * len(eval_hours()))
    a_all, a12, a6 = _window_means(entries, "auroc")
    p_all, p12, p6 = _window_means(entries, "auprc")
    return EvalReport(per_hour=entries,
                      mean_auroc_all=a_all, mean_auroc_last12=a12, mean_auroc_last6=a6,
                      mean_auprc_all=p_all, mean_auprc_last12=p12, mean_auprc_last6=p6,
                      roc=roc_points(pooled_scores, pooled_labels),
                      prevalence=n_case / max(n_case + n_control, 1))


def hourly_eval(records, variant: str, scorer) -> EvalReport:
    """Score every record at every evaluation hour and build the report.

    `scorer(records, windows)` is called once per hour with the hour's
    window specs (one per record, same order) and returns an array of risk
    probabilities.
    """
    records = list(records)
    if not records:
        raise DataError("empty test set")
    labels = np.array([r.label for r in records])
    per_record_windows = [eval_windows(r, variant) for r in records]
    hour_scores: dict[int, np.ndarray] = {}
    for k, hour in enumerate(eval_hours()):
        windows = [wins[k] for wins in per_record_windows]
        scores = np.asarray(scorer(records, windows), dtype=np.float64)
        if scores.shape != (len(records),):
            raise DataError(f"scorer returned shape {scores.shape}, "
                            f"expected ({len(records)},)")
        hour_scores[hour] = scores
    return build_report(hour_scores, labels)


# ---------------------------------------------------------------------------
# Report files: hour rows in T-24..T-1 order, then the three mean rows,
# plus a separate ROC-points file.
# ---------------------------------------------------------------------------

MEAN_ROW_LABELS = ("Mean (All)", "Mean (Last 12h)", "Mean (Last 6h)")


def export_report(report: EvalReport, path) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("hour,auroc,auprc,n_case,n_control\n")
        for e in report.per_hour:
            f.write(f"T-{e.hour},{e.auroc!r},{e.auprc!r},{e.n_case},{e.n_control}\n")
        means = [(MEAN_ROW_LABELS[0], report.mean_auroc_all, report.mean_auprc_all),
                 (MEAN_ROW_LABELS[1], report.mean_auroc_last12, report.mean_auprc_last12),
                 (MEAN_ROW_LABELS[2], report.mean_auroc_last6, report.mean_auprc_last6)]
        for label, a, p in means:
            f.write(f"{label},{a!r},{p!r},,\n")
    roc_path = path.with_name(path.stem + "_roc.csv")
    with open(roc_path, "w") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, thr in report.roc.tolist():
            f.write(f"{fpr!r},{tpr!r},{thr!r}\n")
    return path, roc_path


def parse_report(path) -> tuple[list[HourEntry], dict[str, tuple[float, float]]]:
    """Read back an exported report: (hour entries, means by row label)."""
    entries = []
    means = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "hour,auroc,auprc,n_case,n_control":
            raise DataError(f"unexpected report header {header!r}")
        for line in f:
            cells = line.rstrip("\n").split(",")
            if cells[0].startswith("T-"):
                entries.append(HourEntry(int(cells[0][2:]), float(cells[1]),
                                         float(cells[2]), int(cells[3]), int(cells[4])))
            else:
                means[cells[0]] = (float(cells[1]), float(cells[2]))
    return entries, means
