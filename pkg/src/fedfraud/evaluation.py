"""Classification metrics, PR curves, per-anomaly-type F1 and convergence detection.

Fraud (label 1) is the positive class throughout. Degenerate denominators
yield 0 together with a flag, never NaN.
"""
from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 3
DEFAULT_SIGMA_MAX = 0.005


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BinaryMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    degenerate: bool = False


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    auprc: float
    no_skill: float
    degenerate: bool = False

    @property
    def points(self) -> list:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


@dataclass
class MetricReport:
    f1: float
    precision: float
    recall: float
    accuracy: float
    per_type_f1: dict
    auprc: float
    no_skill: float
    confusion: ConfusionMatrix
    degenerate: bool = False
    pr: PRCurve | None = field(default=None, repr=False)

    @property
    def mean_type_f1(self) -> float:
        return mean_type_f1(self.per_type_f1)

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "per_type_f1": {str(k): v for k, v in sorted(self.per_type_f1.items())},
            "mean_type_f1": self.mean_type_f1,
            "auprc": self.auprc,
            "no_skill": self.no_skill,
            "confusion": self.confusion.as_dict(),
            "degenerate": self.degenerate,
        }


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a).astype(np.int64).reshape(-1)
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{what} must be 0/1")
    return a


def confusion(predicted, actual) -> ConfusionMatrix:
    p = _binary(predicted, "predicted")
    y = _binary(actual, "actual")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValueError("empty evaluation set")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return ConfusionMatrix(tp, fp, fn, int(p.size) - tp - fp - fn)


def binary_metrics(cm: ConfusionMatrix) -> BinaryMetrics:
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(cm.tp, cm.tp + cm.fp)
    recall = ratio(cm.tp, cm.tp + cm.fn)
    f1 = ratio(2 * precision * recall, precision + recall)
    accuracy = (cm.tp + cm.tn) / cm.total if cm.total else 0.0
    return BinaryMetrics(precision, recall, f1, accuracy, degenerate)


def per_type_f1(predicted, labels, type_tags: Sequence[Iterable[int]], types: Iterable[int] | None = None) -> dict:
    """One-vs-rest F1 per anomaly type on {type-k fraud} plus all normal rows.

    A fraud row tagged with several types counts once in each of their subsets.
    Types with no fraud rows in the set are left out.
    """
    p = _binary(predicted, "predicted")
    y = _binary(labels, "labels")
    if len(type_tags) != y.size or p.size != y.size:
        raise ValueError("predicted, labels and type_tags must have equal length")
    tags = [frozenset(t) for t in type_tags]
    if any(yi == 1 and not t for yi, t in zip(y, tags)):
        raise ValueError("every fraud row needs at least one type tag")
    present = sorted({k for yi, t in zip(y, tags) if yi == 1 for k in t})
    wanted = sorted(types) if types is not None else present
    normal = y == 0
    out = {}
    for k in wanted:
        if k not in present:
            log.debug("anomaly type %s absent from evaluation set", k)
            continue
        mask = normal | np.array([yi == 1 and k in t for yi, t in zip(y, tags)])
        out[k] = binary_metrics(confusion(p[mask], y[mask])).f1
    return out


def mean_type_f1(per_type: Mapping) -> float:
    return float(np.mean(list(per_type.values()))) if per_type else 0.0


def headline_f1(site_reports: Mapping) -> float:
    """Mean over sites of each site's mean per-type F1."""
    vals = []
    for rep in site_reports.values():
        per_type = rep.per_type_f1 if isinstance(rep, MetricReport) else rep["per_type_f1"]
        vals.append(mean_type_f1(per_type))
    return float(np.mean(vals)) if vals else 0.0


def pr_curve(scores, labels) -> PRCurve:
    """Precision/recall at every distinct threshold, swept from the highest score.

    AUPRC is the step-wise sum ``sum_i (R_i - R_{i-1}) P_i`` with ``R_0 = 0``.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    no_skill = n_pos / y.size if y.size else 0.0
    if n_pos == 0 or n_pos == y.size:
        empty = np.zeros(0)
        return PRCurve(empty, empty, empty, 1.0 if n_pos else 0.0, no_skill, degenerate=True)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tp = np.cumsum(y)[ends]
    predicted_pos = ends + 1
    precision = tp / predicted_pos
    recall = tp / n_pos
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(recall, precision, s[ends], auprc, no_skill)


def convergence_round(history: Sequence[float], sigma_max: float = DEFAULT_SIGMA_MAX,
                      window: int = DEFAULT_WINDOW) -> int | None:
    """First 1-based round r whose window [r, r + window) has population sd <= sigma_max."""
    if window < 2:
        raise ValueError("window must be >= 2")
    h = np.asarray(history, dtype=np.float64)
    if h.size < window:
        log.debug("history of %d rounds is shorter than window %d", h.size, window)
        return None
    windows = np.lib.stride_tricks.sliding_window_view(h, window)
    ok = np.flatnonzero(windows.std(axis=1) <= sigma_max)
    return int(ok[0]) + 1 if ok.size else None


def fraud_probability(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def evaluate_logits(logits: np.ndarray, labels, type_tags, types: Iterable[int] | None = None) -> MetricReport:
    """Full report for 2-logit outputs: argmax predictions, per-type F1, PR curve on P(fraud)."""
    pred = np.argmax(logits, axis=1)
    cm = confusion(pred, labels)
    m = binary_metrics(cm)
    curve = pr_curve(fraud_probability(logits), labels)
    return MetricReport(
        f1=m.f1,
        precision=m.precision,
        recall=m.recall,
        accuracy=m.accuracy,
        per_type_f1=per_type_f1(pred, labels, type_tags, types),
        auprc=curve.auprc,
        no_skill=curve.no_skill,
        confusion=cm,
        degenerate=m.degenerate,
        pr=curve,
    )
