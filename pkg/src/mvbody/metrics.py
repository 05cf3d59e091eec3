"""Classification metrics: confusion table, AUC-ROC via the Mann-Whitney U
statistic (ties get half credit, tie-corrected variance for the p-value), and
participant-level max-score aggregation.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    auc: float = float("nan")
    p_value: float = float("nan")
    threshold: float = 0.5
    n_pos: int = 0
    n_neg: int = 0
    precision_undefined: bool = False  # TP+FP == 0; precision reported as 0

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def table_row(self, name: str) -> str:
        """One row in the paper-style column order."""
        return (
            f"{name:<28s} {self.accuracy * 100:7.2f}% {self.precision * 100:7.2f}% "
            f"{self.recall * 100:7.2f}% {self.specificity * 100:7.2f}% "
            f"{self.f1:6.3f} {self.auc:6.3f} ({self.p_value:.3f})"
        )


TABLE_HEADER = (
    f"{'method':<28s} {'accuracy':>8s} {'precision':>8s} {'recall':>8s} "
    f"{'specificity':>8s} {'F1':>6s} {'AUC':>6s} (p)"
)


def aggregate_by_participant(scan_scores) -> list:
    """One (participant_id, score) per participant: the max over their scans."""
    best: dict = {}
    for pid, score in scan_scores:
        if pid not in best or score > best[pid]:
            best[pid] = score
    return sorted(best.items())


def confusion_metrics(scores, labels, threshold: float = 0.5):
    """Standard confusion-derived metrics; score >= threshold predicts positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = scores >= threshold
    pos = labels == 1
    counts = ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )
    return counts, report_from_counts(counts, threshold)


def report_from_counts(c: ConfusionCounts, threshold: float = 0.5) -> MetricReport:
    total = c.total
    acc = (c.tp + c.tn) / total if total else 0.0
    undefined = (c.tp + c.fp) == 0
    prec = 0.0 if undefined else c.tp / (c.tp + c.fp)
    rec = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    spec = c.tn / (c.tn + c.fp) if (c.tn + c.fp) else 0.0
    f1 = 2 * prec * rec / (prec + rec) if (prec + rec) > 0 else 0.0
    return MetricReport(
        accuracy=acc,
        precision=prec,
        recall=rec,
        specificity=spec,
        f1=f1,
        threshold=threshold,
        n_pos=c.tp + c.fn,
        n_neg=c.tn + c.fp,
        precision_undefined=undefined,
    )


def _rank_with_ties(x: np.ndarray) -> tuple:
    """Fractional ranks (1-based, ties averaged) and tie-group sizes."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    tie_sizes = []
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        tie_sizes.append(j - i + 1)
        i = j + 1
    return ranks, tie_sizes


def _u_statistic(scores: np.ndarray, labels: np.ndarray) -> tuple:
    ranks, tie_sizes = _rank_with_ties(scores)
    n1 = int(np.sum(labels == 1))
    n2 = len(labels) - n1
    r1 = float(ranks[labels == 1].sum())
    u = r1 - n1 * (n1 + 1) / 2.0
    return u, n1, n2, tie_sizes


def auc_mannwhitney(scores, labels, exact: bool = False):
    """AUC (ties count 1/2) and a two-sided Mann-Whitney p-value.

    The p-value uses the normal approximation of U with tie-corrected variance
    (no continuity correction); exact=True enumerates the permutation null
    instead, allowed for n <= 12.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    u, n1, n2, tie_sizes = _u_statistic(scores, labels)
    if n1 == 0 or n2 == 0:
        raise DegenerateError(f"need both classes for AUC (n_pos={n1}, n_neg={n2})")
    auc = u / (n1 * n2)
    mu = n1 * n2 / 2.0
    if exact:
        n = len(scores)
        if n > 12:
            raise DegenerateError(f"exact permutation p-value limited to n <= 12, got {n}")
        observed = abs(u - mu)
        hits = 0
        count = 0
        for pos_idx in itertools.combinations(range(n), n1):
            lab = np.zeros(n, dtype=np.int64)
            lab[list(pos_idx)] = 1
            u_p, _, _, _ = _u_statistic(scores, lab)
            hits += abs(u_p - mu) >= observed - 1e-12
            count += 1
        return float(auc), hits / count
    n = n1 + n2
    tie_term = sum(t**3 - t for t in tie_sizes)
    var = (n1 * n2 / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return float(auc), 1.0  # all scores tied
    z = (u - mu) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2))
    return float(auc), float(p)


def full_report(scores, labels, threshold: float = 0.5, exact_p: bool = False) -> MetricReport:
    _, rep = confusion_metrics(scores, labels, threshold)
    auc, p = auc_mannwhitney(scores, labels, exact=exact_p)
    return replace(rep, auc=auc, p_value=p)


def save_report(report: MetricReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
