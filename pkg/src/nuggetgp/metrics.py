"""Fit-quality measures: mean square error, pointwise coverage, Mahalanobis
distance of the joint predictive, paired t-test and six-number summaries.

Quantiles everywhere use linear interpolation between order statistics
(numpy's default ``"linear"`` method, R's type 7).
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np
from scipy import stats

from .gp import (
    DEFAULT_A,
    DEFAULT_B,
    CholeskyError,
    CrossDistances,
    Dataset,
    PredictionError,
    chol_with_jitter,
    predict,
)


class DegenerateInputError(ValueError):
    pass


def mse(pred_mean, truth) -> float:
    pred_mean = np.asarray(pred_mean, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred_mean.size != truth.size or truth.size == 0:
        raise ValueError(f"length mismatch: {pred_mean.size} vs {truth.size}")
    return float(np.mean((pred_mean - truth) ** 2))


def pointwise_coverage(bounds, truth) -> float:
    """Fraction of points with ``lo <= truth <= hi``.

    ``bounds`` is a ``(lo, hi)`` pair of vectors or a (p, 2) array.
    """
    if isinstance(bounds, np.ndarray) and bounds.ndim == 2 and bounds.shape[1] == 2:
        lo, hi = bounds[:, 0], bounds[:, 1]
    else:
        lo, hi = bounds
    lo, hi, truth = (np.asarray(v, dtype=float).ravel() for v in (lo, hi, truth))
    if not lo.size == hi.size == truth.size:
        raise ValueError("lo, hi and truth must have equal lengths")
    return float(np.mean((lo <= truth) & (truth <= hi)))


def mahalanobis_distance(truth, loc, joint_scale, df: float) -> float:
    """Square-root Mahalanobis distance of ``truth`` under the predictive.

    The covariance is ``joint_scale * df / (df - 2)``. It is factorized after
    dividing by its mean diagonal, so the jitter ladder acts relative to the
    predictive variance rather than in absolute response units.
    """
    if df <= 2:
        raise ValueError(f"covariance undefined for df={df} <= 2")
    r = np.asarray(truth, dtype=float).ravel() - np.asarray(loc, dtype=float).ravel()
    S = np.asarray(joint_scale, dtype=float) * (df / (df - 2.0))
    if S.shape != (r.size, r.size):
        raise ValueError("joint_scale shape does not match the residual")
    c = float(np.mean(np.diag(S)))
    if not c > 0:
        if np.all(r == 0):
            return 0.0
        raise CholeskyError("predictive covariance is zero", 0.0)
    chol = chol_with_jitter(S / c)
    z = chol.solve_lower(r)
    return float(math.sqrt(float(z @ z) / c))


def paired_t_test(a, b):
    """Paired t statistic on ``a - b`` and its two-sided p-value (n - 1 df).

    Raises
    ------
    DegenerateInputError
        If the differences have zero variance.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError("paired samples need equal lengths")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    diff = a - b
    sd = float(np.std(diff, ddof=1))
    if sd == 0.0 or np.all(diff == diff[0]):
        raise DegenerateInputError("differences have zero variance")
    t = float(np.mean(diff) / (sd / math.sqrt(n)))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return t, p


SUMMARY_ROWS = ("Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max.")


@dataclass(frozen=True)
class Summary:
    min: float
    q1: float
    median: float
    mean: float
    q3: float
    max: float

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            raise ValueError("cannot summarize an empty sample")
        q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
        mean = float(np.mean(v))
        if np.all(v == v[0]):
            mean = float(v[0])
        return cls(float(q[0]), float(q[1]), float(q[2]), mean, float(q[3]), float(q[4]))

    def as_tuple(self):
        return (self.min, self.q1, self.median, self.mean, self.q3, self.max)


class SummaryTable:
    """Six-number summaries, one column per label (e.g. ``nug``, ``nonug``)."""

    def __init__(self, columns: Dict[str, Summary], title: str = ""):
        self.columns = dict(columns)
        self.title = title

    @classmethod
    def from_samples(cls, samples: Dict[str, Iterable[float]], title: str = "") -> "SummaryTable":
        return cls({k: Summary.of(list(v)) for k, v in samples.items()}, title)

    def __getitem__(self, label) -> Summary:
        return self.columns[label]

    def to_csv(self, digits: Optional[int] = None) -> str:
        buf = io.StringIO()
        buf.write(",".join(["stat"] + list(self.columns)) + "\n")
        for i, row in enumerate(SUMMARY_ROWS):
            vals = [s.as_tuple()[i] for s in self.columns.values()]
            cells = [repr(v) if digits is None else f"{v:.{digits}f}" for v in vals]
            buf.write(",".join([row] + cells) + "\n")
        return buf.getvalue()

    def render(self, digits: int = 4) -> str:
        labels = list(self.columns)
        cells = {lab: [f"{v:.{digits}f}" for v in self.columns[lab].as_tuple()] for lab in labels}
        width = max([8, digits + 6] + [len(c) + 2 for col in cells.values() for c in col]
                    + [len(lab) + 2 for lab in labels])
        head = f"{self.title:<10}" + "".join(f"{lab:>{width}}" for lab in labels)
        lines = [head, "-" * len(head)]
        for i, row in enumerate(SUMMARY_ROWS):
            lines.append(f"{row:<10}" + "".join(f"{cells[lab][i]:>{width}}" for lab in labels))
        return "\n".join(lines)


def pooled_mahalanobis(data: Dataset, chain, Xstar, truth, a: float = DEFAULT_A,
                       b: float = DEFAULT_B, include_noise: bool = True):
    """Square-root Mahalanobis distance of ``truth`` (original units) under
    each stored posterior sample's joint predictive, averaged over samples.

    Returns ``(mean_distance, n_failed)``; samples whose joint predictive
    cannot be formed or factorized are skipped.
    """
    truth_std = data.standardize(np.asarray(truth, dtype=float).ravel())
    cache = CrossDistances(data.X, Xstar, joint=True)
    dists = []
    failed = 0
    for hp in chain:
        try:
            pd = predict(data, hp, Xstar, a, b, include_noise=include_noise, want_joint=True,
                         dists=cache)
            dists.append(mahalanobis_distance(truth_std, pd.loc, pd.joint_scale, pd.df))
        except (CholeskyError, PredictionError):
            failed += 1
    if not dists:
        return math.nan, failed
    return float(np.mean(dists)), failed


__all__ = [
    "DegenerateInputError", "Summary", "SummaryTable", "SUMMARY_ROWS", "mahalanobis_distance",
    "mse", "paired_t_test", "pointwise_coverage", "pooled_mahalanobis",
]
