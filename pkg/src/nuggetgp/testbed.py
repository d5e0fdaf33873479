"""Synthetic simulators, a 1-d Nelder-Mead minimizer and design generators.

The simulators are the test functions used to compare nugget and no-nugget
emulators, including two "deterministic but erratic" cartoons: a response
corrupted by noise that is a pure function of the input, and a response that
falls onto a wrong branch for a fixed fraction of inputs. ``fsim`` is a
genuinely iterative simulator: it reports the value a local optimizer reaches
from an input-dependent starting point, so it inherits the optimizer's jumps
between local minima.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import qmc


# ---------------------------------------------------------------------------
# closed-form test functions

def gramacy1d(x):
    """``sin(10 pi x) / (2x) + (x - 1)^4``; pole at ``x = 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x == 0):
        raise ValueError("gramacy1d is undefined at x = 0")
    out = np.sin(10.0 * np.pi * x) / (2.0 * x) + (x - 1.0) ** 4
    return float(out) if out.ndim == 0 else out


def cauchy_density(x, mu, sigma):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return 1.0 / (np.pi * sigma * (1.0 + z * z))


def cauchysine(x):
    """A sine wave with a narrow Cauchy-density dip centred at 1.57."""
    x = np.asarray(x, dtype=float)
    out = np.sin(x) - 0.02 * cauchy_density(x, 1.57, 0.05)
    return float(out) if out.ndim == 0 else out


def exp2d(x1, x2):
    out = np.asarray(x1, dtype=float) * np.exp(-np.square(x1) - np.square(x2))
    return float(out) if out.ndim == 0 else out


def friedman5(x):
    """First Friedman function on five inputs; ``x`` has shape (5,) or (n, 5)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 5:
        raise ValueError("friedman5 takes five inputs")
    out = (10.0 * np.sin(np.pi * x[..., 0] * x[..., 1]) + 20.0 * (x[..., 2] - 0.5) ** 2
           + 10.0 * x[..., 3] + 5.0 * x[..., 4])
    return float(out) if out.ndim == 0 else out


def w(y):
    y = np.asarray(y, dtype=float)
    out = np.exp(-(y - 1.0) ** 2) + np.exp(-0.8 * (y + 1.0) ** 2) - 0.05 * np.sin(8.0 * (y + 0.1))
    return float(out) if out.ndim == 0 else out


def f2d(x1, x2):
    """``-w(x1) w(x2)``: a 2-d surface with about a dozen local minima."""
    out = -np.multiply(w(x1), w(x2))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Nelder-Mead

NM_REFLECT = 1.0
NM_CONTRACT = 0.5
NM_EXPAND = 2.0
NM_RELTOL = 1.49e-8   # sqrt(machine epsilon), rounded
NM_MAXEVAL = 500


class NMResult(NamedTuple):
    argmin: float
    value: float
    n_evals: int
    converged: bool


def nelder_mead_min(objective: Callable[[float], float], init: float,
                    reltol: float = NM_RELTOL, max_evals: int = NM_MAXEVAL) -> NMResult:
    """Minimize a function of one variable with the Nelder-Mead simplex.

    The starting simplex is ``{init, init + step}`` with ``step = 0.1 |init|``
    (0.1 when ``init`` is 0). Iteration stops once the spread of the two
    vertex values is at most ``reltol * (|best| + reltol)`` and the simplex
    midpoint is no better than the best vertex, or after ``max_evals``
    function evaluations.

    This is a local search: started in the basin of a poor local minimum it
    returns that minimum.

    Raises
    ------
    FloatingPointError
        If the objective returns a non-finite value.
    """
    n_evals = 0

    def f(x):
        nonlocal n_evals
        n_evals += 1
        v = float(objective(x))
        if not math.isfinite(v):
            raise FloatingPointError(f"objective is not finite at x={x!r}: {v}")
        return v

    x0 = float(init)
    step = 0.1 * abs(x0) if x0 != 0.0 else 0.1
    xs = [x0, x0 + step]
    fs = [f(xs[0]), f(xs[1])]
    convtol = reltol * (abs(fs[0]) + reltol)
    converged = False
    while True:
        lo, hi = (0, 1) if fs[0] <= fs[1] else (1, 0)
        if n_evals >= max_evals:
            converged = fs[hi] <= fs[lo] + convtol
            break
        if fs[hi] <= fs[lo] + convtol:
            # equal values at distinct vertices can mean the simplex straddles
            # the minimum; only stop if the midpoint is no better
            if xs[0] == xs[1]:
                converged = True
                break
            xm = 0.5 * (xs[0] + xs[1])
            fm = f(xm)
            if not fm < fs[lo] - convtol:
                converged = True
                break
            xs[hi], fs[hi] = xm, fm
            convtol = reltol * (abs(min(fs)) + reltol)
            continue
        # with two vertices the centroid of the non-worst vertices is the best one
        c = xs[lo]
        xr = (1.0 + NM_REFLECT) * c - NM_REFLECT * xs[hi]
        fr = f(xr)
        if fr < fs[lo]:
            xe = NM_EXPAND * xr + (1.0 - NM_EXPAND) * c
            fe = f(xe)
            if fe < fr:
                xs[hi], fs[hi] = xe, fe
            else:
                xs[hi], fs[hi] = xr, fr
        else:
            if fr < fs[hi]:
                xs[hi], fs[hi] = xr, fr
            xc = (1.0 - NM_CONTRACT) * xs[hi] + NM_CONTRACT * c
            fc = f(xc)
            if fc < fs[hi]:
                xs[hi], fs[hi] = xc, fc
            else:
                # shrink toward the best vertex
                xs[hi] = NM_CONTRACT * (xs[hi] + xs[lo])
                fs[hi] = f(xs[hi])
        convtol = reltol * (abs(min(fs)) + reltol)
    best = 0 if fs[0] <= fs[1] else 1
    return NMResult(xs[best], fs[best], n_evals, converged)


def _fsim_scalar(x: float) -> float:
    return nelder_mead_min(lambda x1: f2d(x1, x), x).value


def fsim(x):
    """Minimum of ``x1 -> f2d(x1, x)`` as found by Nelder-Mead started at
    ``x1 = x``. Deterministic, but discontinuous wherever the starting point
    switches basins."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return _fsim_scalar(float(x))
    return np.array([_fsim_scalar(float(v)) for v in x.ravel()]).reshape(x.shape)


_TRUE_GRID = np.linspace(-3.0, 3.0, 2000)


def _true_fmin_scalar(x: float) -> float:
    vals = f2d(_TRUE_GRID, x)
    best = np.argsort(vals, kind="stable")[:5]
    out = float(vals[best[0]])
    h = _TRUE_GRID[1] - _TRUE_GRID[0]
    for i in best:
        lo = max(_TRUE_GRID[0], _TRUE_GRID[i] - h)
        hi = min(_TRUE_GRID[-1], _TRUE_GRID[i] + h)
        res = minimize_scalar(lambda t: f2d(t, x), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        out = min(out, float(res.fun))
    return out


def true_fmin(x):
    """Global minimum over ``x1`` in [-3, 3] of ``f2d(x1, x)``: the smooth
    curve ``fsim`` is trying to compute."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return _true_fmin_scalar(float(x))
    return np.array([_true_fmin_scalar(float(v)) for v in x.ravel()]).reshape(x.shape)


# ---------------------------------------------------------------------------
# keyed (input-seeded) randomness

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(state: np.ndarray) -> np.ndarray:
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _key(x, salt: int) -> np.ndarray:
    # +0.0 folds -0.0 onto 0.0 so equal inputs share a key
    bits = (np.asarray(x, dtype=np.float64) + 0.0).view(np.uint64)
    return bits ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF)


def keyed_uniforms(x, k: int = 1, salt: int = 0) -> np.ndarray:
    """``k`` uniforms on [0, 1) per input, a pure function of the bits of ``x``.

    Returns an array of shape ``np.shape(x) + (k,)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    state = _key(x, salt)
    out = np.empty(x.shape + (k,))
    with np.errstate(over="ignore"):
        for i in range(k):
            state = state + _GOLDEN
            out[..., i] = (_splitmix64(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return out


def keyed_normal(x, salt: int = 0):
    """Standard normal variate(s) keyed by ``x`` (Box-Muller)."""
    scalar = np.ndim(x) == 0
    u = keyed_uniforms(x, 2, salt)
    z = np.sqrt(-2.0 * np.log1p(-u[..., 0])) * np.cos(2.0 * np.pi * u[..., 1])
    return float(z[0]) if scalar else z


def seeded_noise_sim(base: Callable, x, sd: float = 1.0):
    """``base(x) + sd * z`` with ``z`` fixed forever by the value of ``x``."""
    if sd < 0:
        raise ValueError("sd must be >= 0")
    if sd == 0:
        return base(x)
    return base(x) + sd * keyed_normal(x)


def mixture_sim(g_fn: Callable, h_fn: Callable, x, p_bad: float = 0.1):
    """Return ``h_fn(x)`` for the fraction ``p_bad`` of inputs whose keyed
    uniform falls below ``p_bad``, else ``g_fn(x)``."""
    if not 0.0 <= p_bad <= 1.0:
        raise ValueError("p_bad must lie in [0, 1]")
    u = keyed_uniforms(x, 1, salt=1)[..., 0]
    if np.ndim(x) == 0:
        return h_fn(x) if u[0] < p_bad else g_fn(x)
    return np.where(u < p_bad, h_fn(x), g_fn(x))


# ---------------------------------------------------------------------------
# designs

def _domain(domain, m: Optional[int] = None) -> np.ndarray:
    b = np.atleast_2d(np.asarray(domain, dtype=float))
    if b.shape[1] != 2:
        raise ValueError("domain must be a sequence of (lo, hi) pairs")
    if m is not None and b.shape[0] == 1 and m > 1:
        b = np.repeat(b, m, axis=0)
    if m is not None and b.shape[0] != m:
        raise ValueError(f"domain has {b.shape[0]} ranges, expected {m}")
    if not np.all(b[:, 1] > b[:, 0]):
        raise ValueError("domain ranges need lo < hi")
    return b


def uniform_design(n: int, m: int, domain, seed=None) -> np.ndarray:
    """``n`` i.i.d. uniform points in the box ``domain``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    b = _domain(domain, m)
    u = np.random.default_rng(seed).random((n, m))
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


def grid_design(n_per_dim: int, domain) -> np.ndarray:
    """Equispaced lattice including the endpoints, last coordinate fastest."""
    if n_per_dim < 1:
        raise ValueError("n_per_dim must be >= 1")
    b = _domain(domain)
    axes = [np.linspace(lo, hi, n_per_dim) for lo, hi in b]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def lhs_design(n: int, m: int, domain, seed=None) -> np.ndarray:
    """Random Latin hypercube: one point in each of the ``n`` strata of every
    coordinate, jittered within its stratum."""
    if n < 1:
        raise ValueError("n must be >= 1")
    b = _domain(domain, m)
    u = qmc.LatinHypercube(d=m, rng=np.random.default_rng(seed)).random(n)
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


# ---------------------------------------------------------------------------
# catalog

@dataclass(frozen=True)
class SimulatorSpec:
    name: str
    dims: int
    domain: tuple
    fn: Callable[[np.ndarray], np.ndarray]  # (n, dims) raw design -> (n,) responses
    truth: Optional[Callable[[np.ndarray], np.ndarray]] = None
    description: str = ""

    def __post_init__(self):
        if self.dims < 1:
            raise ValueError("dims must be >= 1")
        _domain(self.domain, self.dims)

    @property
    def truth_available(self) -> bool:
        return self.truth is not None

    @property
    def bounds(self) -> np.ndarray:
        return _domain(self.domain, self.dims)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 and self.dims == 1 else np.atleast_2d(X)
        if X.shape[1] != self.dims:
            raise ValueError(f"{self.name} takes {self.dims} inputs, got {X.shape[1]}")
        return np.asarray(self.fn(X), dtype=float).reshape(-1)


def _cartoon_h(x):
    return gramacy1d(x) + 1.0


CATALOG = {
    s.name: s for s in [
        SimulatorSpec("gramacy1d", 1, ((0.5, 2.5),), lambda X: gramacy1d(X[:, 0]),
                      description="sin(10 pi x)/(2x) + (x-1)^4, sparse-data MSE study"),
        SimulatorSpec("cauchysine", 1, ((0.0, 2 * math.pi),), lambda X: cauchysine(X[:, 0]),
                      description="sin(x) - 0.02 Cauchy(x; 1.57, 0.05), nonstationary"),
        SimulatorSpec("exp2d", 2, ((-2.0, 6.0), (-2.0, 6.0)), lambda X: exp2d(X[:, 0], X[:, 1]),
                      description="x1 exp(-x1^2 - x2^2)"),
        SimulatorSpec("friedman5", 5, ((0.0, 1.0),) * 5, lambda X: friedman5(X),
                      description="first Friedman function, anisotropic"),
        SimulatorSpec("fsim", 1, ((-1.5, 1.5),), lambda X: fsim(X[:, 0]),
                      truth=lambda X: true_fmin(X[:, 0]),
                      description="Nelder-Mead minimum of f2d(., x) started at x"),
        SimulatorSpec("true_fmin", 1, ((-1.5, 1.5),), lambda X: true_fmin(X[:, 0]),
                      description="global minimum over x1 of f2d(x1, x)"),
        SimulatorSpec("noisy_gramacy1d", 1, ((0.5, 2.5),),
                      lambda X: seeded_noise_sim(gramacy1d, X[:, 0], 0.1),
                      truth=lambda X: gramacy1d(X[:, 0]),
                      description="gramacy1d plus noise keyed by the input (sd 0.1)"),
        SimulatorSpec("mixture_gramacy1d", 1, ((0.5, 2.5),),
                      lambda X: mixture_sim(gramacy1d, _cartoon_h, X[:, 0], 0.1),
                      truth=lambda X: gramacy1d(X[:, 0]),
                      description="gramacy1d, shifted by +1 on a keyed 10% of inputs"),
    ]
}


def get_simulator(name: str) -> SimulatorSpec:
    try:
        return CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown simulator {name!r}; valid names: {', '.join(sorted(CATALOG))}") \
            from None
