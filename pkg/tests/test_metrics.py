import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nuggetgp.gp import Dataset, predict
from nuggetgp.inference import Chain
from nuggetgp.metrics import (
    SUMMARY_ROWS,
    DegenerateInputError,
    Summary,
    SummaryTable,
    mahalanobis_distance,
    mse,
    paired_t_test,
    pointwise_coverage,
    pooled_mahalanobis,
)


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse(np.arange(5.0) + 1, np.arange(5.0)) == 1.0
    assert mse([0.0, 0.0], [1.0, 2.0]) == 2.5
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])


def test_coverage_examples():
    truth = np.array([0.0, 1.0, 2.0, 3.0])
    assert pointwise_coverage((truth - 1, truth + 1), truth) == 1.0
    assert pointwise_coverage((truth + 5, truth + 5), truth) == 0.0
    lo = np.array([-1.0, -1.0, 5.0, 5.0])
    assert pointwise_coverage(np.column_stack([lo, lo + 3]), truth) == 0.5
    # closed interval: endpoints count as covered
    assert pointwise_coverage((truth, truth), truth) == 1.0


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.integers(2, 40))
def test_mse_and_coverage_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a, t = rng.normal(size=n), rng.normal(size=n)
    lo, hi = a - 1, a + 1
    p = rng.permutation(n)
    assert mse(a[p], t[p]) == pytest.approx(mse(a, t), rel=1e-12)
    assert pointwise_coverage((lo[p], hi[p]), t[p]) == pointwise_coverage((lo, hi), t)


# scale matrices here are Sigma (df - 2) / df so that the covariance is Sigma
def as_scale(S, df):
    return np.asarray(S, dtype=float) * (df - 2) / df


def test_mahalanobis_examples():
    df = 12.0
    assert mahalanobis_distance([1.0, 2.0], [1.0, 2.0], as_scale(np.eye(2), df), df) == 0.0
    r = np.array([3.0, -4.0, 12.0])
    assert mahalanobis_distance(r, np.zeros(3), as_scale(np.eye(3), df), df) == pytest.approx(13.0)
    assert mahalanobis_distance([2.0], [0.0], as_scale([[4.0]], df), df) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mahalanobis_distance([1.0], [0.0], [[1.0]], 2.0)


def test_mahalanobis_rotation_invariant():
    rng = np.random.default_rng(2)
    B = rng.normal(size=(6, 6))
    S = B @ B.T + np.eye(6)
    r = rng.normal(size=6)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    df = 9.0
    base = mahalanobis_distance(r, np.zeros(6), as_scale(S, df), df)
    rot = mahalanobis_distance(Q @ r, np.zeros(6), as_scale(Q @ S @ Q.T, df), df)
    assert rot == pytest.approx(base, abs=1e-8)
    assert base == pytest.approx(math.sqrt(r @ np.linalg.solve(S, r)), rel=1e-10)


def test_mahalanobis_scale_free_jitter():
    # tiny-variance predictive: the ladder works relative to the mean variance
    S = 1e-14 * np.array([[1.0, 0.5], [0.5, 1.0]])
    r = np.array([1e-7, -1e-7])
    val = mahalanobis_distance(r, np.zeros(2), as_scale(S, 10.0), 10.0)
    assert val == pytest.approx(math.sqrt(r @ np.linalg.solve(S, r)), rel=1e-6)


def test_paired_t_test_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=30)
    t, p = paired_t_test(a + 0.5 + 0.1 * rng.normal(size=30), a)
    assert t > 0 and p < 1e-6
    with pytest.raises(DegenerateInputError):
        paired_t_test([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0], [0.0])


def test_paired_t_test_matches_scipy():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=12), rng.normal(size=12)
    t, p = paired_t_test(a, b)
    ref = stats.ttest_rel(a, b)
    assert t == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-10)


def test_paired_t_test_calibration():
    rng = np.random.default_rng(11)
    ps = np.array([paired_t_test(rng.normal(size=10), rng.normal(size=10))[1]
                   for _ in range(10000)])
    assert 0.03 <= np.mean(ps < 0.05) <= 0.07


def test_summary_statistics():
    s = Summary.of([1.0, 2.0, 3.0, 4.0])
    assert s.as_tuple() == (1.0, 1.75, 2.5, 2.5, 3.25, 4.0)
    const = Summary.of([0.1] * 7)
    assert len(set(const.as_tuple())) == 1
    with pytest.raises(ValueError):
        Summary.of([])


@settings(max_examples=40)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_summary_ordering(vals):
    s = Summary.of(vals)
    assert s.min <= s.q1 <= s.median <= s.q3 <= s.max
    assert s.min <= s.mean <= s.max or math.isclose(s.mean, s.min) or math.isclose(s.mean, s.max)


def test_summary_table_csv_and_render():
    tab = SummaryTable.from_samples({"nug": [1.0, 2.0], "nonug": [3.0, 123456789.0]}, "MSE")
    lines = tab.to_csv().splitlines()
    assert lines[0] == "stat,nug,nonug"
    assert [ln.split(",")[0] for ln in lines[1:]] == list(SUMMARY_ROWS)
    text = tab.render()
    assert "123456789.0000" in text
    # columns stay separated however large the values are
    assert all(len(ln) == len(text.splitlines()[0]) for ln in text.splitlines()[2:])


def test_pooled_mahalanobis_averages_samples():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(8, 1))
    data = Dataset.from_raw(X, np.sin(5 * X[:, 0]), [(0, 1)])
    d = np.array([[0.1], [0.3]])
    g = np.array([0.01, 0.05])
    chain = Chain(d, g, np.zeros(2), np.zeros(2), np.array([0.5]), 0.5)
    Xs = np.linspace(0, 1, 9)[:, None]
    truth = np.sin(5 * Xs[:, 0])
    val, failed = pooled_mahalanobis(data, chain, Xs, truth)
    each = []
    for hp in chain:
        pd = predict(data, hp, Xs, want_joint=True)
        each.append(mahalanobis_distance(data.standardize(truth), pd.loc, pd.joint_scale, pd.df))
    assert failed == 0
    assert val == pytest.approx(np.mean(each), rel=1e-12)
