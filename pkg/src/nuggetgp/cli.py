"""Command-line interface: ``nuggetgp {fit,predict,simulate,design,experiment,reproduce}``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .gp import CholeskyError, Dataset, PredictionError
from .harness import (
    DEFAULT_SCALE,
    REFERENCE_REPLICATES,
    ConfigError,
    ExperimentConfig,
    raw_csv,
    reproduce,
    run_experiment,
    summarize_experiment,
)
from .inference import Chain, InitializationError, PriorSpec, posterior_predict, run_chain
from .metrics import DegenerateInputError
from .testbed import CATALOG, get_simulator, grid_design, lhs_design, uniform_design

MODEL_FORMAT = "nuggetgp-model"
MODEL_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("nuggetgp")


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# file formats

def read_table(path):
    """Read a numeric CSV with a header row; returns ``(header, array)``."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    vals = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{path}, line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals.append([float(c) for c in row])
        except ValueError:
            raise InputError(f"{path}, line {lineno}: non-numeric field in {row}") from None
    if not vals:
        raise InputError(f"{path}: no data rows")
    return header, np.array(vals, dtype=float)


def format_table(header, columns) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*columns):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def _write(path, text: str):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def parse_domain(text: str, m=None) -> np.ndarray:
    """``"lo:hi,lo:hi"`` -> (m, 2) array; a single range is repeated ``m`` times."""
    try:
        pairs = [tuple(float(v) for v in part.split(":")) for part in text.split(",")]
    except ValueError:
        raise InputError(f"bad domain {text!r}; expected lo:hi[,lo:hi...]") from None
    if any(len(p) != 2 for p in pairs):
        raise InputError(f"bad domain {text!r}; expected lo:hi[,lo:hi...]")
    b = np.array(pairs)
    if m is not None and b.shape[0] == 1:
        b = np.repeat(b, m, axis=0)
    if not np.all(b[:, 1] > b[:, 0]):
        raise InputError(f"domain {text!r} has lo >= hi")
    return b


def model_to_json(data: Dataset, columns, prior: PriorSpec, chain: Chain, mcmc: dict) -> str:
    """Self-describing model archive: metadata, dataset and the chain as
    embedded CSV."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "columns": list(columns),
        "dataset": {
            "bounds": data.bounds.tolist(),
            "X": data.X.tolist(),
            "y": data.y.tolist(),
            "y_mean": data.y_mean,
            "y_sd": data.y_sd,
        },
        "prior": prior.to_dict(),
        "isotropic": chain.isotropic,
        "mcmc": mcmc,
        "chain": {
            "seed": chain.seed,
            "accept_d": chain.accept_d.tolist(),
            "accept_g": None if math.isnan(chain.accept_g) else chain.accept_g,
            "jitters": chain.jitters.tolist(),
            "csv": chain.to_csv(),
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def model_from_json(text: str):
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise InputError("not a nuggetgp model file")
    ds = doc["dataset"]
    data = Dataset(np.array(ds["X"]), np.array(ds["y"]), np.array(ds["bounds"]),
                   ds["y_mean"], ds["y_sd"])
    ch = doc["chain"]
    chain = Chain.from_csv(ch["csv"], isotropic=doc["isotropic"], seed=ch["seed"],
                           accept_d=ch["accept_d"],
                           accept_g=math.nan if ch["accept_g"] is None else ch["accept_g"],
                           jitters=ch["jitters"])
    return data, PriorSpec.from_dict(doc["prior"]), chain, doc


def _seed_or_entropy(seed):
    if seed is not None:
        return seed
    seed = int(np.random.SeedSequence().generate_state(1)[0])
    print(f"seed: {seed}", file=sys.stderr)
    return seed


# ---------------------------------------------------------------------------
# commands

def cmd_fit(args) -> int:
    header, tab = read_table(args.data)
    if tab.shape[1] < 2:
        raise InputError(f"{args.data}: need at least one input column and a response column")
    X_raw, y = tab[:, :-1], tab[:, -1]
    bounds = parse_domain(args.bounds, X_raw.shape[1]) if args.bounds else None
    if bounds is None:
        lo, hi = X_raw.min(axis=0), X_raw.max(axis=0)
        if np.any(hi <= lo):
            raise InputError("an input column is constant; pass --bounds")
        bounds = np.column_stack([lo, hi])
    if args.no_nugget:
        _, counts = np.unique(X_raw, axis=0, return_counts=True)
        if np.any(counts > 1):
            print(f"error: {int(np.sum(counts > 1))} duplicated input row(s): the zero-nugget "
                  "correlation matrix is exactly singular and can only be factorized with "
                  "jitter; drop --no-nugget or de-duplicate the design", file=sys.stderr)
            return EXIT_NUMERIC
    prior = PriorSpec(args.d_shape, args.d_rate, args.g_shape, args.g_rate, args.a, args.b,
                      fix_g_zero=args.no_nugget)
    if not args.n_iter > args.burn >= 0 or args.thin < 1:
        raise InputError("need --n-iter > --burn >= 0 and --thin >= 1")
    seed = _seed_or_entropy(args.seed)
    try:
        data = Dataset.from_raw(X_raw, y, bounds)
    except ValueError as e:
        raise InputError(str(e)) from None
    chain = run_chain(data, prior, args.n_iter, args.burn, args.thin, seed, args.isotropic)
    mcmc = {"n_iter": args.n_iter, "burn": args.burn, "thin": args.thin}
    _write(args.out, model_to_json(data, header, prior, chain, mcmc))
    if args.chain_csv:
        _write(args.chain_csv, chain.to_csv())
    d_med, g_med = chain.median()
    acc = ", ".join(f"{a:.3f}" for a in chain.accept_d)
    print(f"samples: {len(chain)}", file=sys.stderr)
    print(f"acceptance d: [{acc}]" + ("" if args.no_nugget else f", g: {chain.accept_g:.3f}"),
          file=sys.stderr)
    print("posterior median d: [" + ", ".join(f"{v:.4g}" for v in d_med) + f"], g: {g_med:.4g}",
          file=sys.stderr)
    if chain.max_jitter > 0:
        print(f"warning: jitter up to {chain.max_jitter:.0e} was needed in "
              f"{np.mean(chain.jitters > 0):.0%} of stored samples", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args) -> int:
    data, prior, chain, doc = model_from_json(Path(args.model).read_text(encoding="utf-8"))
    names = doc["columns"][:-1]
    if (args.test is None) == (args.grid is None):
        raise InputError("give exactly one of --test or --grid")
    if args.test is not None:
        header, X_raw = read_table(args.test)
        if X_raw.shape[1] != data.m:
            raise InputError(f"{args.test}: expected {data.m} input columns, got {X_raw.shape[1]}")
        names = header
    else:
        if args.grid < 1:
            raise InputError("--grid must be >= 1")
        X_raw = grid_design(args.grid, data.bounds)
    if not 0.0 < args.level < 1.0:
        raise InputError("--level must lie in (0, 1)")
    X = data.scale(X_raw)
    if np.any(X < -1e-12) or np.any(X > 1 + 1e-12):
        print("warning: some test inputs lie outside the training bounds (extrapolation)",
              file=sys.stderr)
    seed = _seed_or_entropy(args.seed)
    pp = posterior_predict(data, chain, X, args.level, args.draws, args.include_noise,
                           rng=seed, a=prior.a, b=prior.b)
    if pp.degraded:
        print(f"warning: {pp.n_dropped} posterior samples failed to predict", file=sys.stderr)
    cols = [X_raw[:, i] for i in range(X_raw.shape[1])] + [pp.mean, pp.lo, pp.hi]
    _write(args.out, format_table(list(names) + ["mean", "lo", "hi"], cols))
    return EXIT_OK


def _design_from_args(args, m, domain):
    seed = None if args.kind == "grid" else _seed_or_entropy(args.seed)
    if args.kind == "uniform":
        return uniform_design(args.n, m, domain, seed)
    if args.kind == "lhs":
        return lhs_design(args.n, m, domain, seed)
    return grid_design(args.n, domain)


def cmd_design(args) -> int:
    if args.domain is None and args.simulator is None:
        raise InputError("give --domain or --simulator")
    if args.simulator is not None:
        sim = get_simulator(args.simulator)
        domain, m = sim.bounds, sim.dims
    else:
        domain = parse_domain(args.domain, args.dims)
        m = domain.shape[0]
    if args.n < 1:
        raise InputError("n must be >= 1")
    X = _design_from_args(args, m, domain)
    _write(args.out, format_table([f"x_{i + 1}" for i in range(m)], X.T))
    return EXIT_OK


def cmd_simulate(args) -> int:
    sim = get_simulator(args.name)
    if args.design_csv is not None:
        header, X = read_table(args.design_csv)
        if X.shape[1] != sim.dims:
            raise InputError(f"{args.name} takes {sim.dims} inputs, design has {X.shape[1]}")
    else:
        if args.kind is None or args.n is None:
            raise InputError("give a design CSV or --kind and --n")
        args.domain = None
        X = _design_from_args(args, sim.dims, sim.bounds)
        header = [f"x_{i + 1}" for i in range(sim.dims)]
    y = sim(X)
    _write(args.out, format_table(list(header) + ["y"], list(X.T) + [y]))
    return EXIT_OK


def _progress(i, n):
    print(f"\rreplicate {i}/{n}", end="" if i < n else "\n", file=sys.stderr, flush=True)


def _write_experiment(out, name, cfg, results, summary):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}_raw.csv").write_text(raw_csv(cfg, results))
    (out / f"{name}_summary.csv").write_text(summary.to_csv())
    (out / f"{name}.txt").write_text(summary.render() + "\n")
    for r in results:
        if r.plot is not None:
            (out / f"{name}_plot_rep{r.replicate_index}.csv").write_text(r.plot)


def cmd_experiment(args) -> int:
    try:
        cfg = ExperimentConfig.from_json(args.config)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config: {e}") from None
    results = run_experiment(cfg, args.workers, progress=None if args.quiet else _progress)
    summary = summarize_experiment(cfg, results)
    name = Path(args.config).stem
    if args.out:
        _write_experiment(args.out, name, cfg, results, summary)
    print(summary.render())
    return EXIT_NUMERIC if summary.failed_models else EXIT_OK


def cmd_reproduce(args) -> int:
    seed = _seed_or_entropy(args.seed)
    rep = reproduce(args.table_id, args.scale, seed, args.workers,
                    progress=None if args.quiet else _progress)
    if args.out:
        rep.write(args.out)
    print(rep.render())
    return EXIT_NUMERIC if rep.summary.failed_models else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nuggetgp",
                                description="Gaussian-process emulation with an estimated nugget")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    f = sub.add_parser("fit", help="sample the (d, g) posterior for a CSV dataset")
    f.add_argument("data", help="CSV: header, input columns, then the response column")
    f.add_argument("--out", "-o", required=True, help="model file to write")
    f.add_argument("--chain-csv", help="also write the chain as CSV")
    f.add_argument("--no-nugget", action="store_true", help="fix g = 0")
    f.add_argument("--isotropic", action="store_true")
    f.add_argument("--bounds", help="input ranges lo:hi[,lo:hi...] (default: data range)")
    f.add_argument("--seed", type=int)
    f.add_argument("--n-iter", type=int, default=6000)
    f.add_argument("--burn", type=int, default=1000)
    f.add_argument("--thin", type=int, default=10)
    dp = PriorSpec()
    f.add_argument("--d-shape", type=float, default=dp.d_shape)
    f.add_argument("--d-rate", type=float, default=dp.d_rate)
    f.add_argument("--g-shape", type=float, default=dp.g_shape)
    f.add_argument("--g-rate", type=float, default=dp.g_rate)
    f.add_argument("--a", type=float, default=dp.a, help="Inverse-Gamma shape for sigma^2")
    f.add_argument("--b", type=float, default=dp.b, help="Inverse-Gamma scale for sigma^2")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="pooled posterior prediction from a model file")
    pr.add_argument("model")
    pr.add_argument("--test", help="CSV of test inputs (header row)")
    pr.add_argument("--grid", type=int, help="regular grid with this many points per input")
    pr.add_argument("--level", type=float, default=0.9)
    pr.add_argument("--include-noise", action="store_true",
                    help="add the nugget to the test-point variance")
    pr.add_argument("--draws", type=int, default=20, help="t draws per posterior sample")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out", "-o")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="evaluate a catalog simulator on a design")
    s.add_argument("name", help="simulator name: " + ", ".join(sorted(CATALOG)))
    s.add_argument("design_csv", nargs="?")
    s.add_argument("--kind", choices=("uniform", "lhs", "grid"))
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", "-o")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("design", help="generate a design as CSV")
    d.add_argument("kind", choices=("uniform", "lhs", "grid"))
    d.add_argument("n", type=int, help="points (grid: points per input)")
    d.add_argument("--domain", help="lo:hi[,lo:hi...]; write --domain=-1.5:1.5 for negatives")
    d.add_argument("--dims", type=int, help="repeat a single --domain range this many times")
    d.add_argument("--simulator", help="use this simulator's domain")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", "-o")
    d.set_defaults(func=cmd_design)

    e = sub.add_parser("experiment", help="run a replicated experiment from a JSON config")
    e.add_argument("config")
    e.add_argument("--out", "-o", help="directory for raw/summary CSV")
    e.add_argument("--workers", type=int)
    e.add_argument("--quiet", "-q", action="store_true")
    e.set_defaults(func=cmd_experiment)

    r = sub.add_parser("reproduce", help="rerun one of the canonical comparison tables")
    r.add_argument("table_id", help="one of: " + ", ".join(REFERENCE_REPLICATES))
    r.add_argument("--scale", type=float,
                   help="fraction of the original replicate count (default: "
                        + ", ".join(f"{k}={v}" for k, v in DEFAULT_SCALE.items()) + ")")
    r.add_argument("--seed", type=int, default=0, help="master seed")
    r.add_argument("--out", "-o")
    r.add_argument("--workers", type=int)
    r.add_argument("--quiet", "-q", action="store_true")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (InitializationError, CholeskyError, PredictionError, DegenerateInputError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
