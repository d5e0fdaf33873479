"""Replicated nugget vs. no-nugget experiments.

Each replicate draws a fresh design, evaluates a simulator, fits both the
estimated-nugget (``nug``) and zero-nugget (``nonug``) models by MCMC and
scores their pooled posterior predictions on a fixed evaluation grid. Every
random stream is derived from ``(master_seed, replicate, purpose)`` with
:class:`numpy.random.SeedSequence`, so a replicate gives the same numbers
whether it runs alone, in a batch, or in a worker process.
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .gp import CholeskyError, Dataset, PredictionError
from .inference import (
    DegradedFitWarning,
    InitializationError,
    PriorSpec,
    posterior_predict,
    run_chain,
)
from .metrics import (
    DegenerateInputError,
    SummaryTable,
    mse,
    paired_t_test,
    pointwise_coverage,
    pooled_mahalanobis,
)
from .testbed import CATALOG, get_simulator, grid_design, lhs_design, uniform_design

logger = logging.getLogger(__name__)

MODELS = ("nug", "nonug")
METRICS = ("mse", "coverage", "mahalanobis")
DESIGNS = ("uniform", "lhs", "grid")
WORKERS_ENV = "NUGGETGP_WORKERS"

# evaluation-grid sizes
GRID_1D = 1000
GRID_2D = 40
LHS_POINTS = 2000
MAH_POINTS = 300

# stream tags for SeedSequence spawn keys
_DESIGN, _CHAIN, _PREDICT, _GRID = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One replicated experiment.

    JSON keys match the field names; ``models`` and ``metrics`` are lists.
    """

    simulator: str
    design_size: int
    n_replicates: int = 100
    design: str = "uniform"
    models: tuple = MODELS
    n_iter: int = 6000
    burn: int = 1000
    thin: int = 10
    level: float = 0.9
    master_seed: int = 0
    metrics: tuple = ("coverage", "mahalanobis")
    isotropic: bool = False
    against_truth: bool = False
    draws_per_sample: int = 20
    mah_points: int = MAH_POINTS
    prior: dict = field(default_factory=dict)
    plot_replicates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "plot_replicates", tuple(int(i) for i in self.plot_replicates))
        object.__setattr__(self, "prior", dict(self.prior))
        if self.simulator not in CATALOG:
            raise ConfigError(f"unknown simulator {self.simulator!r}; valid names: "
                              f"{', '.join(sorted(CATALOG))}")
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; valid: {', '.join(DESIGNS)}")
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be >= 1")
        if self.design_size < 1:
            raise ConfigError("design_size must be >= 1")
        if not self.models or any(m not in MODELS for m in self.models):
            raise ConfigError(f"models must be a non-empty subset of {MODELS}")
        if not self.metrics or any(m not in METRICS for m in self.metrics):
            raise ConfigError(f"metrics must be a non-empty subset of {METRICS}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        if not self.n_iter > self.burn >= 0 or self.thin < 1:
            raise ConfigError("need n_iter > burn >= 0 and thin >= 1")
        if self.draws_per_sample < 1 or self.mah_points < 1:
            raise ConfigError("draws_per_sample and mah_points must be >= 1")
        try:
            PriorSpec(**self.prior)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad prior: {e}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("models", "metrics", "plot_replicates"):
            d[k] = list(d[k])
        return d

    def prior_for(self, model: str) -> PriorSpec:
        return PriorSpec(**{**self.prior, "fix_g_zero": model == "nonug"})

    def metric_columns(self) -> List[str]:
        cols = list(self.metrics)
        if self.against_truth and "mahalanobis" in self.metrics:
            cols.append("mahalanobis_truth")
        return cols


@dataclass
class ReplicateResult:
    replicate_index: int
    metrics: Dict[str, Dict[str, float]]
    fit_failed: Dict[str, bool]
    max_jitter: Dict[str, float]
    jitter_frac: Dict[str, float]
    g_median: Dict[str, float]
    dropped: Dict[str, int]
    wall_time: float = 0.0
    plot: Optional[str] = None


def _seed(master_seed: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=tuple(key))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class _EvalGrid:
    X_raw: np.ndarray
    X: np.ndarray          # scaled to the unit cube
    truth: np.ndarray
    truth_alt: Optional[np.ndarray]
    mah_idx: np.ndarray


def evaluation_grid(cfg: ExperimentConfig) -> _EvalGrid:
    """Dense evaluation points: a regular grid for 1-d and 2-d simulators,
    a seeded Latin hypercube otherwise; plus the Mahalanobis subsample."""
    sim = get_simulator(cfg.simulator)
    b = sim.bounds
    if sim.dims == 1:
        X_raw = grid_design(GRID_1D, b)
    elif sim.dims == 2:
        X_raw = grid_design(GRID_2D, b)
    else:
        X_raw = lhs_design(LHS_POINTS, sim.dims, b, _seed(cfg.master_seed, _GRID, 0))
    X = (X_raw - b[:, 0]) / (b[:, 1] - b[:, 0])
    truth = sim(X_raw)
    alt = sim.truth(X_raw) if (cfg.against_truth and sim.truth is not None) else None
    p = X_raw.shape[0]
    if p <= cfg.mah_points:
        idx = np.arange(p)
    else:
        rng = np.random.default_rng(_seed(cfg.master_seed, _GRID, 1))
        idx = np.sort(rng.choice(p, cfg.mah_points, replace=False))
    return _EvalGrid(X_raw, X, truth, alt, idx)


def _design(cfg: ExperimentConfig, sim, replicate: int) -> np.ndarray:
    ss = _seed(cfg.master_seed, replicate, _DESIGN)
    if cfg.design == "uniform":
        return uniform_design(cfg.design_size, sim.dims, sim.bounds, ss)
    if cfg.design == "lhs":
        return lhs_design(cfg.design_size, sim.dims, sim.bounds, ss)
    n_per = int(round(cfg.design_size ** (1.0 / sim.dims)))
    return grid_design(n_per, sim.bounds)


def _plot_csv(grid: _EvalGrid, preds: Dict[str, object]) -> str:
    m = grid.X_raw.shape[1]
    cols = [f"x_{i + 1}" for i in range(m)] + ["truth"]
    arrays = [grid.X_raw[:, i] for i in range(m)] + [grid.truth]
    for model, pp in preds.items():
        if pp is None:
            continue
        cols += [f"{model}_mean", f"{model}_lo", f"{model}_hi"]
        arrays += [pp.mean, pp.lo, pp.hi]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for row in zip(*arrays):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def run_replicate(cfg: ExperimentConfig, replicate: int,
                  grid: Optional[_EvalGrid] = None) -> ReplicateResult:
    """Run one replicate; identical whether run alone or inside a batch."""
    t0 = time.perf_counter()
    sim = get_simulator(cfg.simulator)
    if grid is None:
        grid = evaluation_grid(cfg)
    X_raw = _design(cfg, sim, replicate)
    data = Dataset.from_raw(X_raw, sim(X_raw), sim.bounds)
    want_plot = replicate in cfg.plot_replicates
    need_bounds = "coverage" in cfg.metrics or want_plot
    res = ReplicateResult(replicate, {}, {}, {}, {}, {}, {})
    preds = {}
    for k, model in enumerate(MODELS):
        if model not in cfg.models:
            continue
        out: Dict[str, float] = {}
        try:
            chain = run_chain(data, cfg.prior_for(model), cfg.n_iter, cfg.burn, cfg.thin,
                              _int_seed(_seed(cfg.master_seed, replicate, _CHAIN, k)),
                              isotropic=cfg.isotropic)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegradedFitWarning)
                pp = posterior_predict(data, chain, grid.X, cfg.level, cfg.draws_per_sample,
                                       include_noise=True,
                                       rng=_seed(cfg.master_seed, replicate, _PREDICT, k),
                                       bounds=need_bounds)
            preds[model] = pp
            if "mse" in cfg.metrics:
                out["mse"] = mse(pp.mean, grid.truth)
            if "coverage" in cfg.metrics:
                out["coverage"] = pointwise_coverage((pp.lo, pp.hi), grid.truth)
            if "mahalanobis" in cfg.metrics:
                Xs = grid.X[grid.mah_idx]
                out["mahalanobis"], _ = pooled_mahalanobis(data, chain, Xs, grid.truth[grid.mah_idx])
                if "mahalanobis_truth" in cfg.metric_columns():
                    out["mahalanobis_truth"], _ = pooled_mahalanobis(
                        data, chain, Xs, grid.truth_alt[grid.mah_idx])
            res.fit_failed[model] = False
            res.max_jitter[model] = chain.max_jitter
            res.jitter_frac[model] = float(np.mean(chain.jitters > 0))
            res.g_median[model] = float(np.median(chain.g))
            res.dropped[model] = pp.n_dropped
        except (InitializationError, CholeskyError, PredictionError) as e:
            logger.info("replicate %d, model %s: fit failed (%s)", replicate, model, e)
            res.fit_failed[model] = True
            res.max_jitter[model] = math.nan
            res.jitter_frac[model] = math.nan
            res.g_median[model] = math.nan
            res.dropped[model] = 0
            preds[model] = None
        res.metrics[model] = out
    if want_plot:
        res.plot = _plot_csv(grid, preds)
    res.wall_time = time.perf_counter() - t0
    return res


def _worker(args):
    cfg, rep, grid = args
    return run_replicate(cfg, rep, grid)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None,
                   replicates: Optional[Sequence[int]] = None,
                   progress=None) -> List[ReplicateResult]:
    """Run the replicates of ``cfg`` (all of them unless ``replicates`` is
    given), in parallel when ``workers > 1``. Results are ordered by
    replicate index and do not depend on the worker count."""
    workers = default_workers() if workers is None else max(1, int(workers))
    reps = list(range(cfg.n_replicates)) if replicates is None else list(replicates)
    grid = evaluation_grid(cfg)
    results = []
    if workers == 1 or len(reps) == 1:
        for r in reps:
            results.append(run_replicate(cfg, r, grid))
            if progress:
                progress(len(results), len(reps))
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for res in ex.map(_worker, [(cfg, r, grid) for r in reps], chunksize=1):
                results.append(res)
                if progress:
                    progress(len(results), len(reps))
    results.sort(key=lambda r: r.replicate_index)
    for model in cfg.models:
        if results and all(r.fit_failed.get(model, True) for r in results):
            logger.error("every replicate failed for model %s", model)
    return results


def raw_csv(cfg: ExperimentConfig, results: Sequence[ReplicateResult]) -> str:
    """Per-replicate table; excludes wall time so reruns are byte-identical."""
    cols = ["replicate"]
    models = [m for m in MODELS if m in cfg.models]
    mcols = cfg.metric_columns()
    for model in models:
        cols += [f"{model}_{c}" for c in mcols]
        cols += [f"{model}_fit_failed", f"{model}_max_jitter", f"{model}_jitter_frac",
                 f"{model}_g_median", f"{model}_dropped"]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for r in results:
        row = [str(r.replicate_index)]
        for model in models:
            row += [repr(float(r.metrics[model].get(c, math.nan))) for c in mcols]
            row += [str(int(r.fit_failed[model])), repr(float(r.max_jitter[model])),
                    repr(float(r.jitter_frac[model])), repr(float(r.g_median[model])),
                    str(int(r.dropped[model]))]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


@dataclass
class ExperimentSummary:
    tables: Dict[str, SummaryTable]
    ttest: Optional[dict]
    failed_models: List[str]
    n_success: Dict[str, int]

    def to_csv(self) -> str:
        """Stacked six-number summaries, one block per metric."""
        buf = io.StringIO()
        models = None
        for metric, table in self.tables.items():
            if models is None:
                models = list(table.columns)
                buf.write(",".join(["metric", "stat"] + models) + "\n")
            for line in table.to_csv().splitlines()[1:]:
                buf.write(f"{metric},{line}\n")
        if self.ttest is not None:
            t = self.ttest
            buf.write(f"mse_ttest,t,{t['t']!r}\nmse_ttest,p,{t['p']!r}\nmse_ttest,n_pairs,{t['n']}\n")
        return buf.getvalue()

    def render(self) -> str:
        parts = []
        for metric, table in self.tables.items():
            digits = 4 if metric in ("mse", "coverage") else 3
            parts.append(table.render(digits))
        if self.ttest is not None:
            t = self.ttest
            parts.append(f"paired t-test (mse, nug - nonug): t = {t['t']:.3f}, "
                         f"p = {t['p']:.3g}, pairs = {t['n']}")
        if self.failed_models:
            parts.append("every replicate failed for: " + ", ".join(self.failed_models))
        return "\n\n".join(parts)


_TITLES = {"mse": "MSE", "coverage": "coverage", "mahalanobis": "sqrt(mah)",
           "mahalanobis_truth": "sqrt(mah) vs truth"}


def summarize_experiment(cfg: ExperimentConfig,
                         results: Sequence[ReplicateResult]) -> ExperimentSummary:
    """Six-number summaries per model and metric over successful replicates,
    and a paired t-test of MSE over replicates where both models succeeded.

    Raises
    ------
    DegenerateInputError
        If the paired MSE differences have zero variance.
    """
    models = [m for m in MODELS if m in cfg.models]
    n_success = {m: sum(not r.fit_failed[m] for r in results) for m in models}
    failed = [m for m in models if n_success[m] == 0]
    ok_models = [m for m in models if n_success[m] > 0]
    tables = {}
    for metric in cfg.metric_columns():
        samples = {}
        for m in ok_models:
            vals = [r.metrics[m][metric] for r in results if not r.fit_failed[m]]
            vals = [v for v in vals if math.isfinite(v)]
            if vals:
                samples[m] = vals
        if samples:
            tables[metric] = SummaryTable.from_samples(samples, _TITLES[metric])
    ttest = None
    if "mse" in cfg.metrics and set(ok_models) >= {"nug", "nonug"}:
        pairs = [(r.metrics["nug"]["mse"], r.metrics["nonug"]["mse"]) for r in results
                 if not r.fit_failed["nug"] and not r.fit_failed["nonug"]]
        if len(pairs) >= 2:
            a, b = np.array(pairs).T
            t, p = paired_t_test(a, b)
            ttest = {"t": t, "p": p, "n": len(pairs)}
    return ExperimentSummary(tables, ttest, failed, n_success)


# ---------------------------------------------------------------------------
# canonical table reproductions

REFERENCE_REPLICATES = {"fig1": 10000, "fig2": 100, "table1_exp": 100, "table1_fried": 100,
                    "table2": 100}
DEFAULT_SCALE = {"fig1": 0.1, "fig2": 1.0, "table1_exp": 1.0, "table1_fried": 1.0,
                 "table2": 1.0}


def canonical_config(table_id: str, scale: Optional[float] = None, master_seed: int = 0,
                     **overrides) -> ExperimentConfig:
    """The experiment behind one of the reproduced tables, with
    ``ceil(scale * reference_replicates)`` replicates."""
    if table_id not in REFERENCE_REPLICATES:
        raise ConfigError(f"unknown table id {table_id!r}; valid: {', '.join(REFERENCE_REPLICATES)}")
    scale = DEFAULT_SCALE[table_id] if scale is None else scale
    if not 0.0 < scale <= 1.0:
        raise ConfigError("scale must lie in (0, 1]")
    n_rep = math.ceil(scale * REFERENCE_REPLICATES[table_id] - 1e-9)
    base = dict(n_replicates=n_rep, master_seed=master_seed)
    spec = {
        "fig1": dict(simulator="gramacy1d", design_size=20, metrics=("mse",)),
        "fig2": dict(simulator="cauchysine", design_size=10,
                     metrics=("coverage", "mahalanobis")),
        "table1_exp": dict(simulator="exp2d", design_size=20,
                           metrics=("coverage", "mahalanobis")),
        "table1_fried": dict(simulator="friedman5", design_size=25, isotropic=True,
                             metrics=("coverage", "mahalanobis")),
        "table2": dict(simulator="fsim", design_size=20, against_truth=True,
                       metrics=("coverage", "mahalanobis")),
    }[table_id]
    return ExperimentConfig(**{**base, **spec, **overrides})


@dataclass
class Reproduction:
    table_id: str
    config: ExperimentConfig
    results: List[ReplicateResult]
    summary: ExperimentSummary

    @property
    def raw_csv(self) -> str:
        return raw_csv(self.config, self.results)

    @property
    def summary_csv(self) -> str:
        return self.summary.to_csv()

    def render(self) -> str:
        head = (f"{self.table_id}: {self.config.simulator}, {self.config.design} designs of size "
                f"{self.config.design_size}, {self.config.n_replicates} replicates, "
                f"{self.config.level:.0%} pooled intervals")
        return head + "\n\n" + self.summary.render()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.table_id}_raw.csv").write_text(self.raw_csv)
        (out / f"{self.table_id}_summary.csv").write_text(self.summary_csv)
        (out / f"{self.table_id}.txt").write_text(self.render() + "\n")
        (out / f"{self.table_id}_config.json").write_text(
            json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        return out


def reproduce(table_id: str, scale: Optional[float] = None, master_seed: int = 0,
              workers: Optional[int] = None, progress=None, **overrides) -> Reproduction:
    cfg = canonical_config(table_id, scale, master_seed, **overrides)
    results = run_experiment(cfg, workers, progress=progress)
    return Reproduction(table_id, cfg, results, summarize_experiment(cfg, results))


def gridded_fit_check(n: int = 100, seed: int = 0, n_iter: int = 6000, burn: int = 1000,
                      thin: int = 10) -> Dict[str, dict]:
    """Fit both models to ``fsim`` on an ``n``-point grid over its domain.

    Returns per-model ``{"failed", "max_jitter", "jitter_frac", "g_median"}``;
    a failed fit reports the final jitter tried.
    """
    sim = get_simulator("fsim")
    X = grid_design(n, sim.bounds)
    data = Dataset.from_raw(X, sim(X), sim.bounds)
    out = {}
    for k, model in enumerate(MODELS):
        prior = PriorSpec(fix_g_zero=model == "nonug")
        try:
            ch = run_chain(data, prior, n_iter, burn, thin, seed + k)
            out[model] = {"failed": False, "max_jitter": ch.max_jitter,
                          "jitter_frac": float(np.mean(ch.jitters > 0)),
                          "g_median": float(np.median(ch.g))}
        except InitializationError as e:
            out[model] = {"failed": True, "max_jitter": math.inf, "jitter_frac": 1.0,
                          "g_median": math.nan, "error": str(e)}
    return out


__all__ = [
    "ConfigError", "ExperimentConfig", "ExperimentSummary",
    "ReplicateResult", "Reproduction", "canonical_config", "evaluation_grid",
    "gridded_fit_check", "raw_csv", "reproduce", "run_experiment", "run_replicate",
    "summarize_experiment", "DegenerateInputError",
]
