"""Bayesian inference for the range parameters and nugget.

Independent Gamma priors sit on each ``d_l`` and on ``g``; sigma^2 is
integrated out, so the sampler targets

    log p(d, g | y) = log_marginal(y | d, g) + log_prior(d, g) + const.

Each sweep updates every ``d_l`` in turn and then ``g`` with its own
Metropolis step (Metropolis-within-Gibbs). A step is a log-normal random walk
most of the time and, with probability ``INDEPENDENCE_PROB``, an independent
draw from the prior, which lets the chain jump between the modes of the
bimodal (d, g) posteriors that nugget models produce.
"""
from __future__ import annotations

import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import lapack
from scipy.special import gammaln

from .gp import (
    DEFAULT_A,
    DEFAULT_B,
    CholeskyError,
    CrossDistances,
    Dataset,
    Hyperparams,
    PredictionError,
    PredictiveDist,
    chol_with_jitter,
    predict,
)

logger = logging.getLogger(__name__)

INDEPENDENCE_PROB = 0.1
DEFAULT_PROPOSAL_SD = 0.5
INIT_D = 0.5
INIT_G = 0.01
MAX_INIT_STALL = 1000
DROP_WARN_FRACTION = 0.1


class InitializationError(RuntimeError):
    pass


class DegradedFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Gamma(shape, rate) priors on each ``d_l`` and on ``g``; Inverse-Gamma
    ``(a, b)`` on sigma^2. ``fix_g_zero`` selects the no-nugget model."""

    d_shape: float = 1.5
    d_rate: float = 1.5
    g_shape: float = 1.0
    g_rate: float = 10.0
    a: float = DEFAULT_A
    b: float = DEFAULT_B
    fix_g_zero: bool = False

    def __post_init__(self):
        for name in ("d_shape", "d_rate", "g_shape", "g_rate", "a", "b"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("d_shape", "d_rate", "g_shape", "g_rate", "a", "b", "fix_g_zero")}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls(**d)


def _gamma_logpdf(x, shape, rate):
    if x <= 0:
        return -math.inf
    return shape * math.log(rate) + (shape - 1.0) * math.log(x) - rate * x - math.lgamma(shape)


def log_prior(hp: Hyperparams, prior: PriorSpec) -> float:
    """Sum of independent Gamma log-densities over the free parameters.

    Isotropic hyperparameters contribute a single ``d`` term. ``g`` is
    skipped when the prior fixes it at zero; otherwise ``g = 0`` lies outside
    the support and gives ``-inf``.
    """
    ds = hp.d[:1] if hp.isotropic else hp.d
    lp = sum(_gamma_logpdf(float(x), prior.d_shape, prior.d_rate) for x in ds)
    if prior.fix_g_zero:
        if hp.g != 0.0:
            raise ValueError("fix_g_zero prior with a nonzero nugget")
        return lp
    return lp + _gamma_logpdf(hp.g, prior.g_shape, prior.g_rate)


class _Target:
    """Log-likelihood evaluator bound to one dataset; shares precomputed
    squared distances across the thousands of calls a chain makes."""

    def __init__(self, data: Dataset, a: float, b: float, isotropic: bool):
        self.y = np.ascontiguousarray(data.y)
        self.n = data.n
        self.a, self.b = a, b
        self.isotropic = isotropic
        D = data.sqdist
        self.D = D.sum(axis=0) if isotropic else D
        self.const = (a * math.log(b) + gammaln(a + 0.5 * self.n) - gammaln(a)
                      - 0.5 * self.n * math.log(2.0 * math.pi))
        self.diag = np.diag_indices(self.n)

    def loglik(self, d: np.ndarray, g: float):
        """Return ``(log_marginal, jitter_used)``; ``(-inf, nan)`` on failure."""
        if self.isotropic:
            S = self.D / d[0]
        elif self.D.shape[0] == 1:
            S = self.D[0] / d[0]
        else:
            S = np.tensordot(1.0 / d, self.D, axes=1)
        K = np.exp(-S)
        K[self.diag] = 1.0 + g
        try:
            L, jitter = _chol_ladder(K)
        except CholeskyError:
            return -math.inf, math.nan
        v, info = lapack.dtrtrs(L, self.y, lower=1)
        q = float(v @ v)
        log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
        ll = self.const - 0.5 * log_det - (self.a + 0.5 * self.n) * math.log(self.b + 0.5 * q)
        return ll, jitter


def _chol_ladder(K):
    L, info = lapack.dpotrf(K, lower=1, clean=1)
    if info == 0:
        return L, 0.0
    f = chol_with_jitter(K)
    return f.L, f.jitter_used


@dataclass
class ChainState:
    d: np.ndarray
    g: float
    log_lik: float
    log_prior: float
    jitter: float = 0.0

    @property
    def log_post(self) -> float:
        return self.log_lik + self.log_prior


def metropolis_accept(log_ratio: float, rng: np.random.Generator) -> bool:
    """Metropolis rule; a ratio of at least one is always accepted."""
    if log_ratio >= 0.0:
        return True
    if not log_ratio > -math.inf:
        return False
    return math.log(rng.random()) < log_ratio


def _propose(cur: float, shape: float, rate: float, sd: float, rng):
    """Return ``(proposal, log_correction, independent)``.

    For the random walk the correction is the log-Jacobian of the log-scale
    move; for the prior draw the prior ratio cancels against the proposal
    ratio, flagged by ``independent``.
    """
    if rng.random() < INDEPENDENCE_PROB:
        return rng.gamma(shape, 1.0 / rate), 0.0, True
    new = cur * math.exp(sd * rng.standard_normal())
    return new, math.log(new) - math.log(cur), False


def _accept(ll, lp, ll_new, lp_new, corr, indep, rng) -> bool:
    # a state stuck at -inf (no factorization yet) takes any finite proposal
    if not math.isfinite(ll):
        return math.isfinite(ll_new)
    if indep:
        return metropolis_accept(ll_new - ll, rng)
    return metropolis_accept((ll_new + lp_new) - (ll + lp) + corr, rng)


def mwg_step(state: ChainState, data, prior: PriorSpec, proposal_sd: float,
             rng: np.random.Generator, isotropic: bool = False):
    """One Metropolis-within-Gibbs sweep over ``d`` then ``g``.

    Returns the new state and a boolean array of accept flags, one per
    updated ``d`` component followed by one for ``g`` (absent when the
    nugget is fixed at zero). A proposal whose correlation matrix cannot be
    factorized has log-likelihood ``-inf`` and is rejected.

    ``data`` is a :class:`Dataset`, or any target exposing
    ``loglik(d, g) -> (log_lik, jitter)`` and an ``isotropic`` flag (the
    evaluator a running chain reuses, or a synthetic test density).
    """
    target = data if hasattr(data, "loglik") else _Target(data, prior.a, prior.b, isotropic)
    d = state.d.copy()
    g = state.g
    ll, lp, jit = state.log_lik, state.log_prior, state.jitter
    n_d = 1 if target.isotropic else d.size
    flags = []
    for ell in range(n_d):
        cur = d[ell]
        new, corr, indep = _propose(cur, prior.d_shape, prior.d_rate, proposal_sd, rng)
        d_new = d.copy()
        if target.isotropic:
            d_new[:] = new
        else:
            d_new[ell] = new
        if not (new > 0 and math.isfinite(new)):
            flags.append(False)
            continue
        ll_new, jit_new = target.loglik(d_new, g)
        lp_new = lp - _gamma_logpdf(cur, prior.d_shape, prior.d_rate) \
            + _gamma_logpdf(new, prior.d_shape, prior.d_rate)
        ok = _accept(ll, lp, ll_new, lp_new, corr, indep, rng)
        if ok:
            d, ll, lp, jit = d_new, ll_new, lp_new, jit_new
        flags.append(ok)
    if not prior.fix_g_zero:
        new, corr, indep = _propose(g, prior.g_shape, prior.g_rate, proposal_sd, rng)
        ok = False
        if new > 0 and math.isfinite(new):
            ll_new, jit_new = target.loglik(d, new)
            lp_new = lp - _gamma_logpdf(g, prior.g_shape, prior.g_rate) \
                + _gamma_logpdf(new, prior.g_shape, prior.g_rate)
            ok = _accept(ll, lp, ll_new, lp_new, corr, indep, rng)
            if ok:
                g, ll, lp, jit = new, ll_new, lp_new, jit_new
        flags.append(ok)
    return ChainState(d, g, ll, lp, jit), np.array(flags, dtype=bool)


@dataclass
class Chain:
    """Stored posterior draws of ``(d, g)`` after burn-in and thinning."""

    d: np.ndarray            # (S, m)
    g: np.ndarray            # (S,)
    log_posts: np.ndarray    # (S,)
    jitters: np.ndarray      # (S,) jitter needed to factorize each state
    accept_d: np.ndarray     # per-d-component acceptance fraction
    accept_g: float          # nan when g is fixed
    seed: Optional[int] = None
    isotropic: bool = False

    def __len__(self):
        return self.g.size

    def hyperparams(self, i: int) -> Hyperparams:
        return Hyperparams(self.d[i], float(self.g[i]), self.isotropic)

    def __iter__(self):
        for i in range(len(self)):
            yield self.hyperparams(i)

    @property
    def max_jitter(self) -> float:
        return float(np.max(self.jitters)) if len(self) else 0.0

    def median(self):
        return np.median(self.d, axis=0), float(np.median(self.g))

    def subset(self, idx) -> "Chain":
        idx = np.asarray(idx, dtype=int)
        return Chain(self.d[idx], self.g[idx], self.log_posts[idx], self.jitters[idx],
                     self.accept_d, self.accept_g, self.seed, self.isotropic)

    def to_csv(self) -> str:
        """One row per stored sample: ``d_1..d_m, g, log_post``."""
        m = self.d.shape[1]
        buf = io.StringIO()
        buf.write(",".join([f"d_{i + 1}" for i in range(m)] + ["g", "log_post"]) + "\n")
        for i in range(len(self)):
            row = [repr(float(v)) for v in self.d[i]]
            row += [repr(float(self.g[i])), repr(float(self.log_posts[i]))]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, isotropic: bool = False, seed=None,
                 accept_d=None, accept_g=math.nan, jitters=None) -> "Chain":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        header = lines[0].split(",")
        m = sum(h.startswith("d_") for h in header)
        if header != [f"d_{i + 1}" for i in range(m)] + ["g", "log_post"]:
            raise ValueError(f"unexpected chain header {header}")
        vals = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, m + 2)
        S = vals.shape[0]
        return cls(vals[:, :m].copy(), vals[:, m].copy(), vals[:, m + 1].copy(),
                   np.zeros(S) if jitters is None else np.asarray(jitters, dtype=float),
                   np.full(m, math.nan) if accept_d is None else np.asarray(accept_d, dtype=float),
                   accept_g, seed, isotropic)


def run_chain(data: Dataset, prior: PriorSpec = PriorSpec(), n_iter: int = 6000,
              burn: int = 1000, thin: int = 10, seed=None, isotropic: bool = False,
              proposal_sd: float = DEFAULT_PROPOSAL_SD) -> Chain:
    """Run Metropolis-within-Gibbs from ``d_l = 0.5``, ``g = 0.01`` (or 0).

    Stores every ``thin``-th state after ``burn`` iterations, so the chain
    holds ``(n_iter - burn) // thin`` samples. Deterministic given ``seed``.

    Raises
    ------
    InitializationError
        If the log-posterior stays non-finite for 1000 consecutive
        iterations from the start.
    """
    if not n_iter > burn >= 0:
        raise ValueError("need n_iter > burn >= 0")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    rng = np.random.default_rng(seed)
    target = _Target(data, prior.a, prior.b, isotropic)
    d0 = np.full(data.m, INIT_D)
    g0 = 0.0 if prior.fix_g_zero else INIT_G
    ll, jit = target.loglik(d0, g0)
    state = ChainState(d0, g0, ll, log_prior(Hyperparams(d0, g0, isotropic), prior), jit)

    n_d = 1 if isotropic else data.m
    acc = np.zeros(n_d + (0 if prior.fix_g_zero else 1))
    stall = 0
    S = (n_iter - burn) // thin
    ds = np.empty((S, data.m))
    gs = np.empty(S)
    lps = np.empty(S)
    jits = np.empty(S)
    k = 0
    for it in range(1, n_iter + 1):
        state, flags = mwg_step(state, target, prior, proposal_sd, rng)
        acc += flags
        if not math.isfinite(state.log_post):
            stall += 1
            if stall >= MAX_INIT_STALL:
                raise InitializationError(
                    f"log-posterior still non-finite after {stall} iterations "
                    "(correlation matrix cannot be factorized)")
        else:
            stall = 0
        if it > burn and (it - burn) % thin == 0:
            ds[k], gs[k], lps[k], jits[k] = state.d, state.g, state.log_post, state.jitter
            k += 1
    acc /= n_iter
    return Chain(ds, gs, lps, jits, acc[:n_d].copy(),
                 math.nan if prior.fix_g_zero else float(acc[n_d]),
                 None if seed is None or not isinstance(seed, (int, np.integer)) else int(seed),
                 isotropic)


@dataclass
class PosteriorPrediction:
    """Pooled posterior predictive summaries in original response units."""

    mean: np.ndarray
    lo: Optional[np.ndarray]
    hi: Optional[np.ndarray]
    samples: List[PredictiveDist] = field(repr=False, default_factory=list)
    n_dropped: int = 0
    level: float = 0.9

    @property
    def degraded(self) -> bool:
        total = len(self.samples) + self.n_dropped
        return total > 0 and self.n_dropped > DROP_WARN_FRACTION * total


def posterior_predict(data: Dataset, chain: Chain, Xstar, level: float = 0.9,
                      draws_per_sample: int = 20, include_noise: bool = True,
                      rng=None, a: float = DEFAULT_A, b: float = DEFAULT_B,
                      bounds: bool = True, chunk: int = 256) -> PosteriorPrediction:
    """Mixture-of-t posterior predictive over the stored chain.

    The pooled mean averages the per-sample locations. Pooled bounds are the
    empirical ``(1 -+ level)/2`` quantiles of ``draws_per_sample`` Student-t
    draws per posterior sample and point. Samples whose prediction fails are
    dropped; more than 10% dropped raises a :class:`DegradedFitWarning`.
    """
    if len(chain) == 0:
        raise ValueError("empty chain")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    rng = np.random.default_rng(rng)
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    dists = CrossDistances(data.X, Xstar)
    samples = []
    dropped = 0
    for hp in chain:
        try:
            samples.append(predict(data, hp, Xstar, a, b, include_noise=include_noise,
                                   dists=dists))
        except (CholeskyError, PredictionError):
            dropped += 1
    if not samples:
        raise PredictionError("prediction failed for every posterior sample")
    if dropped > DROP_WARN_FRACTION * len(chain):
        warnings.warn(f"{dropped} of {len(chain)} posterior samples failed to predict",
                      DegradedFitWarning, stacklevel=2)
    locs = np.stack([s.loc for s in samples])
    mean = data.destandardize(locs.mean(axis=0))
    lo = hi = None
    if bounds:
        sds = np.sqrt(np.stack([s.scale for s in samples]))
        df = samples[0].df
        S, p = locs.shape
        lo = np.empty(p)
        hi = np.empty(p)
        probs = [0.5 * (1.0 - level), 0.5 * (1.0 + level)]
        locs_t, sds_t = locs.T, sds.T
        for j0 in range(0, p, chunk):
            j1 = min(p, j0 + chunk)
            t = rng.standard_t(df, size=(j1 - j0, S, draws_per_sample))
            draws = locs_t[j0:j1, :, None] + sds_t[j0:j1, :, None] * t
            q = np.quantile(draws.reshape(j1 - j0, -1), probs, axis=1)
            lo[j0:j1], hi[j0:j1] = q
        lo = data.destandardize(lo)
        hi = data.destandardize(hi)
    return PosteriorPrediction(mean, lo, hi, samples, dropped, level)


__all__ = [
    "Chain", "ChainState", "DegradedFitWarning", "InitializationError", "PosteriorPrediction",
    "PriorSpec", "log_prior", "metropolis_accept", "mwg_step", "posterior_predict", "run_chain",
]
