import json
import math

import numpy as np
import pytest

from nuggetgp.harness import (
    REFERENCE_REPLICATES,
    ConfigError,
    ExperimentConfig,
    ReplicateResult,
    canonical_config,
    evaluation_grid,
    raw_csv,
    reproduce,
    run_experiment,
    run_replicate,
    summarize_experiment,
)

FAST = dict(n_iter=300, burn=100, thin=10, draws_per_sample=5, mah_points=50)


@pytest.fixture(scope="module")
def small_cfg():
    return canonical_config("fig2", scale=0.03, metrics=("mse", "coverage", "mahalanobis"),
                            **FAST)


@pytest.fixture(scope="module")
def small_run(small_cfg):
    return run_experiment(small_cfg, workers=1)


def test_rerun_is_identical(small_cfg, small_run):
    again = run_experiment(small_cfg, workers=1)
    assert raw_csv(small_cfg, again) == raw_csv(small_cfg, small_run)


def test_single_replicate_matches_batch(small_cfg, small_run):
    alone = run_experiment(small_cfg, replicates=[2])
    assert len(alone) == 1
    assert alone[0].metrics == small_run[2].metrics
    assert alone[0].g_median == small_run[2].g_median


def test_replicates_differ(small_run):
    assert small_run[0].metrics["nug"]["mse"] != small_run[1].metrics["nug"]["mse"]


def test_raw_csv_columns(small_cfg, small_run):
    lines = raw_csv(small_cfg, small_run).splitlines()
    header = lines[0].split(",")
    assert header[0] == "replicate" and "nug_coverage" in header and "nonug_mahalanobis" in header
    assert "wall_time" not in lines[0]
    assert len(lines) == 1 + small_cfg.n_replicates
    assert all(len(ln.split(",")) == len(header) for ln in lines[1:])


def test_single_model_has_no_other_columns():
    cfg = canonical_config("fig2", scale=0.01, models=["nug"], **FAST)
    res = run_experiment(cfg)
    text = raw_csv(cfg, res)
    assert "nonug" not in text
    summary = summarize_experiment(cfg, res)
    assert list(summary.tables["coverage"].columns) == ["nug"]
    assert summary.ttest is None


def test_metric_values_in_range(small_run):
    for r in small_run:
        for model in ("nug", "nonug"):
            m = r.metrics[model]
            assert 0.0 <= m["coverage"] <= 1.0
            assert m["mse"] >= 0.0 and m["mahalanobis"] >= 0.0
        assert r.g_median["nonug"] == 0.0 and r.g_median["nug"] > 0.0


def test_summary_of_one_replicate_is_flat():
    cfg = canonical_config("fig2", scale=0.01, **FAST)
    summary = summarize_experiment(cfg, run_experiment(cfg))
    for table in summary.tables.values():
        for model in table.columns:
            assert len(set(table[model].as_tuple())) == 1


def _fake(i, mse_nug, mse_nonug, nonug_failed=False):
    nonug = {} if nonug_failed else {"mse": mse_nonug}
    return ReplicateResult(
        i, {"nug": {"mse": mse_nug}, "nonug": nonug},
        {"nug": False, "nonug": nonug_failed},
        {"nug": 0.0, "nonug": math.nan if nonug_failed else 0.0},
        {"nug": 0.0, "nonug": math.nan if nonug_failed else 0.0},
        {"nug": 0.1, "nonug": math.nan if nonug_failed else 0.0},
        {"nug": 0, "nonug": 0})


def test_pairing_drops_failed_replicates():
    cfg = ExperimentConfig(simulator="gramacy1d", design_size=5, n_replicates=4, metrics=["mse"])
    res = [_fake(0, 1.0, 2.0), _fake(1, 1.5, 2.2), _fake(2, 0.9, math.nan, nonug_failed=True),
           _fake(3, 1.1, 2.9)]
    s = summarize_experiment(cfg, res)
    assert s.n_success == {"nug": 4, "nonug": 3}
    assert s.ttest["n"] == 3
    assert s.tables["mse"]["nug"].max == 1.5
    assert s.tables["mse"]["nonug"].min == 2.0
    assert "nonug_fit_failed" in raw_csv(cfg, res)
    lines = raw_csv(cfg, res).splitlines()
    col = lines[0].split(",").index("nonug_fit_failed")
    assert [ln.split(",")[col] for ln in lines[1:]] == ["0", "0", "1", "0"]


def test_all_failed_model_reported():
    cfg = ExperimentConfig(simulator="gramacy1d", design_size=5, n_replicates=2, metrics=["mse"])
    res = [_fake(0, 1.0, 0.0, True), _fake(1, 2.0, 0.0, True)]
    s = summarize_experiment(cfg, res)
    assert s.failed_models == ["nonug"]
    assert "every replicate failed for: nonug" in s.render()


def test_canonical_configs():
    c = canonical_config("fig2")
    assert (c.simulator, c.design_size, c.n_replicates, c.level) == ("cauchysine", 10, 100, 0.9)
    assert set(c.models) == {"nug", "nonug"}
    c = canonical_config("table1_fried")
    assert c.design_size == 25 and c.isotropic
    c = canonical_config("table1_exp")
    assert c.simulator == "exp2d" and c.design_size == 20 and not c.isotropic
    c = canonical_config("table2")
    assert c.simulator == "fsim" and c.design_size == 20 and c.against_truth
    assert "mahalanobis_truth" in c.metric_columns()
    c = canonical_config("fig1", scale=1.0)
    assert c.simulator == "gramacy1d" and c.metrics == ("mse",) and c.n_replicates == 10000


@pytest.mark.parametrize("table,scale,expected", [
    ("fig2", 0.25, 25), ("fig2", 1.0, 100), ("fig1", None, 1000), ("table2", 0.013, 2),
])
def test_scale_contract(table, scale, expected):
    assert canonical_config(table, scale).n_replicates == expected
    assert expected == math.ceil((scale or 0.1) * REFERENCE_REPLICATES[table] - 1e-9)


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"simulator": "fsim", "design_size": 5, "bogus": 1})
    with pytest.raises(ConfigError, match="gramacy1d"):
        ExperimentConfig(simulator="nope", design_size=5)
    with pytest.raises(ConfigError):
        ExperimentConfig(simulator="fsim", design_size=5, models=["other"])
    with pytest.raises(ConfigError):
        ExperimentConfig(simulator="fsim", design_size=5, level=1.0)
    with pytest.raises(ConfigError):
        ExperimentConfig(simulator="fsim", design_size=5, prior={"d_shape": -1})
    with pytest.raises(ConfigError):
        canonical_config("table9")
    with pytest.raises(ConfigError):
        canonical_config("fig2", scale=0.0)


def test_config_json_round_trip(tmp_path):
    cfg = canonical_config("table2", scale=0.05, prior={"a": 2.0, "b": 2.0})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_json(p) == cfg


def test_evaluation_grids():
    g1 = evaluation_grid(canonical_config("fig2"))
    assert g1.X.shape == (1000, 1) and g1.mah_idx.size == 300
    assert np.all((g1.X >= 0) & (g1.X <= 1))
    g2 = evaluation_grid(canonical_config("table1_exp"))
    assert g2.X.shape == (1600, 2)
    g5 = evaluation_grid(canonical_config("table1_fried"))
    assert g5.X.shape == (2000, 5)
    assert np.array_equal(g5.X, evaluation_grid(canonical_config("table1_fried")).X)
    gt = evaluation_grid(canonical_config("table2"))
    assert gt.truth_alt is not None and np.all(gt.truth_alt <= gt.truth + 1e-9)


def test_nonug_flags_more_often_on_fsim():
    cfg = canonical_config("table2", scale=0.04, n_iter=1500, burn=500, thin=10,
                           metrics=("coverage",))
    res = run_experiment(cfg)
    flags = {m: sum(r.fit_failed[m] or r.jitter_frac[m] > 0 for r in res) for m in ("nug", "nonug")}
    assert flags["nonug"] > flags["nug"]


def test_plot_replicate_and_reproduction_files(tmp_path):
    rep = reproduce("fig2", scale=0.01, plot_replicates=[0], **FAST)
    assert rep.results[0].plot.splitlines()[0] == "x_1,truth,nug_mean,nug_lo,nug_hi,nonug_mean,nonug_lo,nonug_hi"
    out = rep.write(tmp_path)
    names = sorted(p.name for p in out.iterdir())
    assert names == ["fig2.txt", "fig2_config.json", "fig2_raw.csv", "fig2_summary.csv"]
    assert "nug" in (out / "fig2_summary.csv").read_text().splitlines()[0]


def test_worker_count_does_not_change_results(small_cfg, small_run):
    par = run_experiment(small_cfg, workers=2, replicates=[0, 1])
    assert [r.metrics for r in par] == [r.metrics for r in small_run[:2]]


def test_run_replicate_without_grid(small_cfg, small_run):
    assert run_replicate(small_cfg, 0).metrics == small_run[0].metrics
