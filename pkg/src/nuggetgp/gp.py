"""Gaussian-process building blocks: data scaling, Gaussian correlation with a
nugget, jittered Cholesky factorization, the sigma^2-integrated (Student-t)
marginal likelihood and Student-t kriging prediction.

Responses are modelled with a zero mean after standardization, and the
process variance sigma^2 carries an Inverse-Gamma(a, b) prior that is
integrated out analytically.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import stats
from scipy.linalg import lapack
from scipy.special import gammaln

JITTER_START = 1e-10
JITTER_MAX = 1e-4

# default Inverse-Gamma prior on sigma^2
DEFAULT_A = 1.5
DEFAULT_B = 1.5


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized even at the largest jitter."""

    def __init__(self, msg, jitter):
        super().__init__(msg)
        self.jitter = jitter


class PredictionError(ArithmeticError):
    pass


def _as_bounds(bounds) -> np.ndarray:
    b = np.atleast_2d(np.asarray(bounds, dtype=float))
    if b.ndim != 2 or b.shape[1] != 2:
        raise ValueError("bounds must be a sequence of (lo, hi) pairs")
    if not np.all(b[:, 1] > b[:, 0]):
        raise ValueError(f"degenerate bounds (need lo < hi): {b.tolist()}")
    return b


def scale_inputs(raw, bounds, tol: float = 1e-12) -> np.ndarray:
    """Map raw inputs onto the unit cube, column by column.

    Parameters
    ----------
    raw : array_like, shape (n, m)
    bounds : array_like, shape (m, 2)
        Per-dimension ``(lo, hi)`` with ``lo < hi``.
    tol : float
        Slack allowed outside the bounds before the input is rejected.

    Returns
    -------
    ndarray, shape (n, m)
        ``(raw - lo) / (hi - lo)``, clipped to [0, 1] when within ``tol``.
    """
    b = _as_bounds(bounds)
    x = np.atleast_2d(np.asarray(raw, dtype=float))
    if x.shape[1] != b.shape[0]:
        raise ValueError(f"raw has {x.shape[1]} columns but {b.shape[0]} bounds were given")
    lo, hi = b[:, 0], b[:, 1]
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise ValueError("raw inputs fall outside the given bounds")
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def unscale_inputs(scaled, bounds) -> np.ndarray:
    b = _as_bounds(bounds)
    return b[:, 0] + np.atleast_2d(scaled) * (b[:, 1] - b[:, 0])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design on the unit cube plus standardized responses.

    ``X`` is (n, m) in [0, 1]; ``y`` has zero mean and unit sample standard
    deviation unless n < 2 or the raw response is constant, in which case
    ``y_sd`` is 1.
    """

    X: np.ndarray
    y: np.ndarray
    bounds: np.ndarray
    y_mean: float = 0.0
    y_sd: float = 1.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        b = _as_bounds(self.bounds)
        if X.shape[0] != y.size:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if X.shape[1] != b.shape[0]:
            raise ValueError("X and bounds disagree on the input dimension")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("inputs and responses must be finite")
        if np.any(X < 0.0) or np.any(X > 1.0):
            raise ValueError("scaled inputs must lie in [0, 1]")
        if not self.y_sd > 0:
            raise ValueError("y_sd must be positive")
        X.setflags(write=False)
        y.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "y_mean", float(self.y_mean))
        object.__setattr__(self, "y_sd", float(self.y_sd))

    @classmethod
    def from_raw(cls, X_raw, y_raw, bounds=None) -> "Dataset":
        """Scale inputs to the unit cube and standardize responses.

        When ``bounds`` is omitted the column ranges of ``X_raw`` are used.
        """
        X_raw = np.asarray(X_raw, dtype=float)
        X_raw = X_raw.reshape(-1, 1) if X_raw.ndim == 1 else np.atleast_2d(X_raw)
        y_raw = np.asarray(y_raw, dtype=float).ravel()
        if bounds is None:
            bounds = np.column_stack([X_raw.min(axis=0), X_raw.max(axis=0)])
        X = scale_inputs(X_raw, bounds)
        y_mean = float(np.mean(y_raw))
        y_sd = float(np.std(y_raw, ddof=1)) if y_raw.size >= 2 else 1.0
        if not y_sd > 0:
            y_sd = 1.0
        return cls(X, (y_raw - y_mean) / y_sd, bounds, y_mean, y_sd)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def y_original(self) -> np.ndarray:
        return self.y * self.y_sd + self.y_mean

    def standardize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.y_mean) / self.y_sd

    def destandardize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.y_sd + self.y_mean

    def scale(self, raw) -> np.ndarray:
        """Scale new inputs with the stored bounds, allowing extrapolation."""
        x = np.atleast_2d(np.asarray(raw, dtype=float))
        return (x - self.bounds[:, 0]) / (self.bounds[:, 1] - self.bounds[:, 0])

    @cached_property
    def sqdist(self) -> np.ndarray:
        """Per-dimension squared differences, shape (m, n, n)."""
        diff = self.X.T[:, :, None] - self.X.T[:, None, :]
        return diff * diff


@dataclass(frozen=True)
class Hyperparams:
    """Correlation ranges ``d`` (one per input) and the nugget ``g``."""

    d: np.ndarray
    g: float = 0.0
    isotropic: bool = False

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float)).copy()
        if d.ndim != 1 or d.size == 0:
            raise ValueError("d must be a non-empty vector")
        if self.isotropic and not np.all(d == d[0]):
            raise ValueError("isotropic hyperparameters need equal d entries")
        if not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise ValueError(f"range parameters must be positive, got {d}")
        if not (self.g >= 0 and np.isfinite(self.g)):
            raise ValueError(f"nugget must be >= 0, got {self.g}")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "g", float(self.g))

    @classmethod
    def iso(cls, d: float, m: int, g: float = 0.0) -> "Hyperparams":
        return cls(np.full(m, float(d)), g, isotropic=True)

    def __eq__(self, other):
        if not isinstance(other, Hyperparams):
            return NotImplemented
        return (np.array_equal(self.d, other.d) and self.g == other.g
                and self.isotropic == other.isotropic)

    def __hash__(self):
        return hash((self.d.tobytes(), self.g, self.isotropic))


def _check_dims(X, hp: Hyperparams):
    if X.shape[1] != hp.d.size:
        raise ValueError(f"inputs have {X.shape[1]} columns but d has {hp.d.size} entries")


def _sqdist_cross(Xstar: np.ndarray, X: np.ndarray, d: np.ndarray) -> np.ndarray:
    # weighted squared distance, shape (p, n)
    out = np.zeros((Xstar.shape[0], X.shape[0]))
    for ell in range(X.shape[1]):
        diff = Xstar[:, ell, None] - X[None, :, ell]
        out += diff * diff / d[ell]
    return out


class CrossDistances:
    """Per-input squared differences between test and training rows, reused
    across hyperparameter settings (e.g. every sample of a chain).

    ``cross`` has shape (m, p, n); ``self_`` (m, p, p) is only built when
    ``joint`` is set.
    """

    def __init__(self, X, Xstar, joint: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
        if X.shape[1] != Xstar.shape[1]:
            raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Xstar.shape[1]}")
        self.Xstar = Xstar
        self.cross = np.stack([(Xstar[:, k, None] - X[None, :, k]) ** 2 for k in range(X.shape[1])])
        self.self_ = None
        if joint:
            self.self_ = np.stack([(Xstar[:, k, None] - Xstar[None, :, k]) ** 2
                                   for k in range(X.shape[1])])

    @staticmethod
    def weighted(D: np.ndarray, d: np.ndarray) -> np.ndarray:
        if D.shape[0] == 1:
            return D[0] / d[0]
        return np.tensordot(1.0 / d, D, axes=1)


def correlation_matrix(X, hp: Hyperparams) -> np.ndarray:
    """Gaussian correlation plus ``g`` on the diagonal, shape (n, n)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dims(X, hp)
    K = np.exp(-_sqdist_cross(X, X, hp.d))
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] = 1.0 + hp.g
    return K


def cross_correlation(X, Xstar, hp: Hyperparams) -> np.ndarray:
    """Correlation between test rows and training rows, shape (p, n).

    Test locations are new realizations: no nugget is added even when a test
    row coincides with a training row.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if X.shape[1] != Xstar.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Xstar.shape[1]}")
    _check_dims(X, hp)
    return np.exp(-_sqdist_cross(Xstar, X, hp.d))


def _data_correlation(data: Dataset, hp: Hyperparams) -> np.ndarray:
    _check_dims(data.X, hp)
    D = data.sqdist
    if hp.isotropic:
        S = D.sum(axis=0) / hp.d[0]
    elif data.m == 1:
        S = D[0] / hp.d[0]
    else:
        S = np.tensordot(1.0 / hp.d, D, axes=1)
    K = np.exp(-S)
    K[np.diag_indices_from(K)] = 1.0 + hp.g
    return K


@dataclass(frozen=True)
class CholFactor:
    L: np.ndarray
    jitter_used: float
    log_det: float

    def solve_lower(self, b) -> np.ndarray:
        """Return ``L^{-1} b``."""
        x, info = lapack.dtrtrs(self.L, np.asarray(b, dtype=float), lower=1)
        if info != 0:
            raise np.linalg.LinAlgError(f"triangular solve failed (info={info})")
        return x

    def solve(self, b) -> np.ndarray:
        """Return ``A^{-1} b`` for the (jittered) factorized matrix."""
        x, info = lapack.dpotrs(self.L, np.asarray(b, dtype=float), lower=1)
        if info != 0:
            raise np.linalg.LinAlgError(f"cholesky solve failed (info={info})")
        return x


def _jitter_ladder():
    j = JITTER_START
    while j <= JITTER_MAX * (1 + 1e-9):
        yield j
        j *= 10.0


def chol_with_jitter(A) -> CholFactor:
    """Lower Cholesky factor of a symmetric matrix, adding diagonal jitter
    (1e-10, 1e-9, ..., 1e-4) only when the plain factorization fails.

    Raises
    ------
    CholeskyError
        If the matrix is still not positive definite at jitter 1e-4.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    if A.size and np.max(np.abs(A - A.T)) > 1e-10 * max(1.0, np.max(np.abs(A))):
        raise ValueError("matrix is not symmetric")
    if not np.all(np.isfinite(A)):
        raise CholeskyError("matrix has non-finite entries", 0.0)
    jitter = 0.0
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info != 0:
        B = A.copy()
        diag = np.diag_indices_from(B)
        base = A.diagonal().copy()
        for jitter in _jitter_ladder():
            B[diag] = base + jitter
            L, info = lapack.dpotrf(B, lower=1, clean=1)
            if info == 0:
                break
        else:
            raise CholeskyError(
                f"matrix not positive definite even with jitter {jitter:.0e}", jitter)
    return CholFactor(L, jitter, 2.0 * float(np.sum(np.log(np.diag(L)))))


def _factor(data: Dataset, hp: Hyperparams) -> CholFactor:
    return chol_with_jitter(_data_correlation(data, hp))


def _log_marginal_from(chol: CholFactor, y: np.ndarray, a: float, b: float) -> float:
    n = y.size
    v = chol.solve_lower(y)
    q = float(v @ v)
    return (a * np.log(b) + gammaln(a + 0.5 * n) - gammaln(a)
            - 0.5 * n * np.log(2.0 * np.pi) - 0.5 * chol.log_det
            - (a + 0.5 * n) * np.log(b + 0.5 * q))


def log_marginal(data: Dataset, hp: Hyperparams, a: float = DEFAULT_A,
                 b: float = DEFAULT_B, chol: Optional[CholFactor] = None) -> float:
    """Log marginal likelihood ``log p(y | d, g)`` with sigma^2 integrated out
    against an Inverse-Gamma(a, b) prior (a multivariate Student-t density).

    ``chol`` may carry a factorization of the training correlation already
    computed for ``hp``. Factorization failures propagate as
    :class:`CholeskyError`.
    """
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if data.n < 1:
        raise ValueError("need at least one observation")
    if chol is None:
        chol = _factor(data, hp)
    return _log_marginal_from(chol, data.y, a, b)


@dataclass(frozen=True)
class PredictiveDist:
    """Student-t predictive distribution at p test locations.

    ``loc`` and ``scale`` are in standardized response units; ``scale`` holds
    the squared scale of each marginal t. ``y_mean``/``y_sd`` convert back
    to original units.
    """

    df: float
    loc: np.ndarray
    scale: np.ndarray
    joint_scale: Optional[np.ndarray] = None
    includes_noise: bool = False
    y_mean: float = 0.0
    y_sd: float = 1.0
    jitter_used: float = 0.0

    @property
    def variance(self) -> np.ndarray:
        if self.df <= 2:
            raise PredictionError(f"variance undefined for df={self.df} <= 2")
        return self.scale * self.df / (self.df - 2.0)

    @property
    def covariance(self) -> np.ndarray:
        if self.joint_scale is None:
            raise ValueError("joint scale was not computed")
        if self.df <= 2:
            raise PredictionError(f"covariance undefined for df={self.df} <= 2")
        return self.joint_scale * self.df / (self.df - 2.0)

    def mean_original(self) -> np.ndarray:
        return self.loc * self.y_sd + self.y_mean


PSD_TOL = 1e-8


def predict(data: Dataset, hp: Hyperparams, Xstar, a: float = DEFAULT_A,
            b: float = DEFAULT_B, include_noise: bool = True,
            want_joint: bool = False, chol: Optional[CholFactor] = None,
            dists: Optional[CrossDistances] = None) -> PredictiveDist:
    """Student-t kriging prediction at scaled test inputs ``Xstar``.

    With K the training correlation (including the nugget) and k* the test
    cross-correlation, the predictive is t with ``df = 2a + n``, location
    ``k* K^-1 y`` and scale matrix ``s2 (K** - k* K^-1 k*^T)`` where
    ``s2 = (2b + y^T K^-1 y) / (2a + n)``. ``K**`` has unit diagonal, plus
    ``g`` when ``include_noise`` is set.

    Raises
    ------
    CholeskyError
        If the training correlation cannot be factorized.
    PredictionError
        If the joint scale has an eigenvalue below ``-1e-8`` (in correlation
        units) after symmetrization.

    ``dists`` may carry precomputed distances for these ``Xstar``; it must
    have been built with ``joint=True`` when ``want_joint`` is set.
    """
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != data.m:
        raise ValueError(f"test inputs have {Xstar.shape[1]} columns, expected {data.m}")
    if chol is None:
        chol = _factor(data, hp)
    n = data.n
    df = 2.0 * a + n
    v = chol.solve_lower(data.y)
    s2 = (2.0 * b + float(v @ v)) / df
    d = hp.d
    if dists is None:
        kstar = np.exp(-_sqdist_cross(Xstar, data.X, d))
    else:
        kstar = np.exp(-dists.weighted(dists.cross, d))
    alpha = chol.solve(data.y)
    loc = kstar @ alpha
    V = chol.solve_lower(kstar.T)  # (n, p)
    diag = 1.0 + (hp.g if include_noise else 0.0)
    point = diag - np.einsum("ij,ij->j", V, V)
    joint = None
    if want_joint:
        if dists is None:
            C = np.exp(-_sqdist_cross(Xstar, Xstar, d))
        else:
            C = np.exp(-dists.weighted(dists.self_, d))
        C[np.diag_indices_from(C)] = diag
        C -= V.T @ V
        C = 0.5 * (C + C.T)
        _check_psd(C)
        joint = s2 * C
        point = np.diag(C).copy()
    scale = s2 * np.maximum(point, 0.0)
    if joint is not None:
        joint[np.diag_indices_from(joint)] = scale
    return PredictiveDist(df, loc, scale, joint, include_noise, data.y_mean,
                          data.y_sd, chol.jitter_used)


def _check_psd(C: np.ndarray):
    # a successful factorization of C + tol*I means no eigenvalue below -tol
    if C.size == 0:
        return
    B = C.copy()
    B[np.diag_indices_from(B)] += PSD_TOL
    _, info = lapack.dpotrf(B, lower=1, overwrite_a=1)
    if info == 0:
        return
    lam = np.linalg.eigvalsh(C)[0]
    if lam < -PSD_TOL:
        raise PredictionError(f"joint predictive scale is not PSD (min eigenvalue {lam:.3g})")


def t_quantile(df: float, prob) -> np.ndarray:
    return stats.t.ppf(prob, df)


def credible_bounds(pd: PredictiveDist, level: float = 0.9):
    """Central equal-tailed Student-t interval per point, in original units.

    Returns
    -------
    lo, hi : ndarray
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    q = t_quantile(pd.df, 0.5 * (1.0 + level))
    half = q * np.sqrt(np.maximum(pd.scale, 0.0))
    lo = (pd.loc - half) * pd.y_sd + pd.y_mean
    hi = (pd.loc + half) * pd.y_sd + pd.y_mean
    return lo, hi


__all__ = [
    "CholFactor", "CholeskyError", "CrossDistances", "Dataset", "Hyperparams", "PredictionError",
    "PredictiveDist", "chol_with_jitter", "correlation_matrix", "credible_bounds",
    "cross_correlation", "log_marginal", "predict", "scale_inputs", "unscale_inputs",
    "DEFAULT_A", "DEFAULT_B",
]
