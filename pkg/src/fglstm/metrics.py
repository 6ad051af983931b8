"""Ranking metrics and the significance machinery behind model comparisons.

AU-ROC follows the Mann-Whitney convention (ties get half credit); AU-PRC is
average precision with step interpolation, which avoids the optimism of
linearly interpolated precision-recall curves.  Welch's unequal-variance
t-test with Welch-Satterthwaite degrees of freedom backs every significance
claim; two-sided p-values come from the regularized incomplete beta function.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import DataError, DimensionError, UndefinedMetricError


def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("scores and labels must be equal-length vectors")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise DataError("labels must be 0 or 1")
    return scores, labels


def au_roc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), computed via average ranks."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AU-ROC needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # Average rank within each tie group (1-based ranks).
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[labels == 1.0].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def au_prc(scores, labels) -> float:
    """Average precision: sum of precision at each distinct threshold times
    the recall it adds, walking thresholds from the highest score down."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AU-PRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = 0
    fp = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp_new = tp + int(y[i : j + 1].sum())
        fp_new = fp + (j - i + 1) - int(y[i : j + 1].sum())
        precision = tp_new / (tp_new + fp_new)
        ap += precision * (tp_new - tp) / n_pos
        tp, fp = tp_new, fp_new
        i = j + 1
    return float(ap)


@dataclass
class WelchResult:
    t: float
    df: float
    p: float


def welch_t_test(sample_a, sample_b) -> WelchResult:
    """Two-sample t-test without the equal-variance assumption.

    Degrees of freedom via Welch-Satterthwaite; the two-sided p-value is
    I_{df/(df+t^2)}(df/2, 1/2).  Two zero-variance samples short-circuit to
    p=1 (equal means) or p=0.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
        raise DataError("both samples need at least two observations")
    na, nb = len(a), len(b)
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    diff = a.mean() - b.mean()
    if va == 0.0 and vb == 0.0:
        df = float(na + nb - 2)
        if diff == 0.0:
            return WelchResult(t=0.0, df=df, p=1.0)
        return WelchResult(t=np.sign(diff) * np.inf, df=df, p=0.0)
    sa, sb = va / na, vb / nb
    se = np.sqrt(sa + sb)
    t = diff / se
    df = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return WelchResult(t=float(t), df=float(df), p=p)


@dataclass
class RunMetrics:
    auroc: float
    auprc: float
    loss: float = float("nan")


@dataclass
class RunReport:
    """Per-run metrics for one (task, model) pair over repeated seeds."""

    task: str
    model: str
    runs: list = field(default_factory=list)  # list[RunMetrics]

    @property
    def aurocs(self) -> np.ndarray:
        return np.array([r.auroc for r in self.runs])

    @property
    def auprcs(self) -> np.ndarray:
        return np.array([r.auprc for r in self.runs])

    def mean_std(self, metric: str):
        vals = getattr(self, metric + "s")
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), std


def aggregate_runs(task: str, model: str, runs) -> RunReport:
    """Bundle repeated-run metrics; means use the sample std (n-1)."""
    runs = list(runs)
    if not runs:
        raise DataError("cannot aggregate zero runs")
    return RunReport(task=task, model=model, runs=runs)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def write_stats_report(path, reports, reference_model: str) -> None:
    """Stats CSV: per (model, task, metric) mean, std, and the Welch p-value
    against the named reference model on the same task."""
    by_key = {(r.model, r.task): r for r in reports}
    refs = {task: by_key.get((reference_model, task)) for _, task in by_key}
    if all(ref is None for ref in refs.values()):
        raise DataError(f"reference model {reference_model!r} not among the reports")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "task", "metric", "mean", "std", "p_vs_reference", "stars"])
        for report in reports:
            ref = refs.get(report.task)
            for metric in ("auroc", "auprc"):
                mean, std = report.mean_std(metric)
                if ref is None:
                    pval = ""
                    stars = ""
                else:
                    res = welch_t_test(getattr(report, metric + "s"), getattr(ref, metric + "s"))
                    pval = f"{res.p:.6g}"
                    stars = significance_stars(res.p)
                writer.writerow([report.model, report.task, metric, f"{mean:.17g}", f"{std:.17g}", pval, stars])
