"""Permutation-test p-values for training-distribution membership."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .density import DensityModel, log_likelihoods
from .errors import InputError, StatisticsError

DEFAULT_BINS = 20


@dataclass(frozen=True)
class LikelihoodIndex:
    """Ascending training log-likelihoods (nats).

    Ties are counted with <=, so a query equal to an indexed value ranks
    above it.
    """

    values: np.ndarray
    tie_policy: str = "le"

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=np.float64))
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return len(self.values)


def build_index(model: DensityModel, train) -> LikelihoodIndex:
    images = getattr(train, "images", train)
    return LikelihoodIndex(log_likelihoods(model, images))


def rank_statistic(index: LikelihoodIndex, ll):
    """T = number of indexed values <= ll (vectorised over ``ll``)."""
    t = np.searchsorted(index.values, ll, side="right")
    return int(t) if np.ndim(t) == 0 else t


def p_value_from_ll(index: LikelihoodIndex, ll):
    return (rank_statistic(index, ll) + 1) / (index.n + 1)


def p_value(index: LikelihoodIndex, image, model: DensityModel) -> float:
    ll = float(log_likelihoods(model, image)[0])
    return p_value_from_ll(index, ll)


@dataclass
class DetectionReport:
    """Per-input detection statistics for one source (clean, fgsm, ...)."""

    source: str
    log_likelihood: np.ndarray
    bpd: np.ndarray
    T: np.ndarray
    p: np.ndarray
    ids: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.p))

    def __len__(self):
        return len(self.p)


def detect(index: LikelihoodIndex, model: DensityModel, images, source: str = "clean") -> DetectionReport:
    ll = log_likelihoods(model, images)
    dims = int(np.prod(model.image_shape))
    t = np.searchsorted(index.values, ll, side="right")
    return DetectionReport(source, ll, -ll / (dims * math.log(2)), t, (t + 1) / (index.n + 1))


def ks_uniform(p: Sequence[float]) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``p`` and U(0, 1)."""
    x = np.sort(np.asarray(p, dtype=np.float64))
    n = len(x)
    i = np.arange(1, n + 1)
    return float(max((i / n - x).max(), (x - (i - 1) / n).max()))


@dataclass
class PValueHistogram:
    counts: np.ndarray
    edges: np.ndarray
    ks: float
    n: int


def pvalue_histogram(reports, bins: int = DEFAULT_BINS) -> PValueHistogram:
    if isinstance(reports, DetectionReport):
        p = reports.p
    elif len(reports) and isinstance(reports[0], DetectionReport):
        p = np.concatenate([r.p for r in reports])
    else:
        p = np.asarray(reports, dtype=np.float64)
    if len(p) < 30:
        raise StatisticsError(f"need at least 30 p-values, got {len(p)}")
    counts, edges = np.histogram(p, bins=bins, range=(0.0, 1.0))
    return PValueHistogram(counts, edges, ks_uniform(p), len(p))


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_curve(negative, positive) -> RocCurve:
    """ROC of score = -p; negatives are training images, positives suspect ones."""
    neg = np.asarray(getattr(negative, "p", negative), dtype=np.float64)
    pos = np.asarray(getattr(positive, "p", positive), dtype=np.float64)
    if len(neg) == 0 or len(pos) == 0:
        raise InputError("both negative and positive sets must be non-empty")
    scores = np.concatenate([-neg, -pos])
    truth = np.concatenate([np.zeros(len(neg)), np.ones(len(pos))])
    order = np.argsort(-scores, kind="mergesort")
    scores, truth = scores[order], truth[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp = np.cumsum(truth)[last]
    fp = np.cumsum(1 - truth)[last]
    tpr = np.r_[0.0, tp / len(pos)]
    fpr = np.r_[0.0, fp / len(neg)]
    # p-value cut: flag inputs with p <= threshold
    thresholds = np.r_[-np.inf, -scores[last]]
    auc = float(_trapezoid(tpr, fpr))
    return RocCurve(thresholds, fpr, tpr, auc)


def write_report_csv(path, reports: Sequence[DetectionReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "source", "log_likelihood", "bpd", "T", "p"])
        for r in reports:
            for i in range(len(r)):
                w.writerow([int(r.ids[i]), r.source, repr(float(r.log_likelihood[i])),
                            repr(float(r.bpd[i])), int(r.T[i]), repr(float(r.p[i]))])


def write_roc_csv(path, roc: RocCurve) -> None:
    """Rows of (threshold, fpr, tpr) where threshold is a p-value cut (flag p <= threshold)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        w.writerow(["auc", repr(roc.auc), ""])
