import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from hongbao.stats import (RANDOMIZATION_COVARIATES, bh_adjust, kolmogorov_sf, ks_two_sample,
                           randomization_check, randomization_table)

samples = st.lists(st.integers(-50, 50), min_size=2, max_size=60)


@pytest.mark.parametrize("lam", [0.05, 0.3, 0.7, 1.0, 1.18, 1.2, 1.5, 2.0, 3.0, 5.0])
def test_kolmogorov_sf_matches_scipy(lam):
    assert kolmogorov_sf(lam) == pytest.approx(sps.kstwobign.sf(lam), rel=1e-9, abs=1e-15)


def test_kolmogorov_sf_edges():
    assert kolmogorov_sf(0.0) == 1.0
    assert kolmogorov_sf(50.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(samples, samples)
def test_ks_statistic_matches_scipy(x, y):
    ours = ks_two_sample(x, y)
    ref = sps.ks_2samp(x, y, method="asymp")
    assert ours.statistic == pytest.approx(ref.statistic, abs=1e-12)
    assert 0.0 <= ours.pvalue <= 1.0


@settings(max_examples=100, deadline=None)
@given(samples, samples)
def test_ks_symmetric_and_transform_invariant(x, y):
    a = ks_two_sample(x, y)
    assert ks_two_sample(y, x).statistic == a.statistic
    tx = np.exp(np.asarray(x) / 10.0)
    ty = np.exp(np.asarray(y) / 10.0)
    assert ks_two_sample(tx, ty).statistic == pytest.approx(a.statistic, abs=1e-15)


def test_ks_identical_samples():
    x = np.random.default_rng(0).normal(size=300)
    r = ks_two_sample(x, x.copy())
    assert r.statistic == 0.0 and r.pvalue == 1.0


def test_ks_detects_shift():
    g = np.random.default_rng(1)
    r = ks_two_sample(g.random(1000), g.random(1000) + 0.5)
    assert r.statistic >= 0.5
    assert r.pvalue < 1e-6


def test_ks_empty_rejected():
    with pytest.raises(ValueError):
        ks_two_sample([], [1.0])


def test_bh_hand_example():
    adj, rej = bh_adjust([0.01, 0.02, 0.03, 0.04], alpha=0.1)
    assert np.allclose(adj, [0.04] * 4)
    assert rej.all()


def test_bh_single_and_ones():
    adj, _ = bh_adjust([0.3])
    assert adj.tolist() == [0.3]
    adj, rej = bh_adjust([1.0, 1.0, 1.0])
    assert adj.tolist() == [1.0, 1.0, 1.0] and not rej.any()


def test_bh_rejects_out_of_range():
    with pytest.raises(ValueError):
        bh_adjust([0.5, 1.2])
    with pytest.raises(ValueError):
        bh_adjust([-0.1])


def _bh_reference(p):
    p = np.asarray(p, dtype=float)
    m = len(p)
    order = np.argsort(p)
    adj = np.empty(m)
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, m * p[i] / rank)
        adj[i] = running
    return adj


pvals = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40)


@settings(max_examples=200, deadline=None)
@given(pvals)
def test_bh_matches_reference_and_bounds(p):
    adj, rej = bh_adjust(p, alpha=0.1)
    assert np.allclose(adj, _bh_reference(p))
    assert (adj >= np.asarray(p) - 1e-15).all()
    assert (rej == (adj <= 0.1)).all()


@settings(max_examples=100, deadline=None)
@given(pvals, st.data())
def test_bh_monotone(p, data):
    bumps = data.draw(st.lists(st.floats(0.0, 1.0), min_size=len(p), max_size=len(p)))
    q = np.minimum(np.asarray(p) + np.asarray(bumps), 1.0)
    assert (bh_adjust(q)[0] >= bh_adjust(p)[0] - 1e-12).all()


def _strata_frame(seed, leak=0.0, strata=40, per=30):
    g = np.random.default_rng(seed)
    n = strata * per
    t = g.integers(1, 400, n).astype(float)
    df = pd.DataFrame({"A": 1000, "N": 5, "O": np.repeat(np.arange(strata), per), "T": t})
    tz = (t - t.mean()) / t.std()
    df["wealth"] = leak * tz + np.sqrt(1 - leak ** 2) * g.normal(size=n)
    df["flat"] = 7.0
    return df


def test_randomization_constant_attribute_has_zero_slopes():
    r = randomization_check(_strata_frame(0), "flat")
    assert (r.table["slope"] == 0).all()
    assert r.n_significant == 0


def test_randomization_slope_matches_per_stratum_ols():
    df = _strata_frame(3)
    r = randomization_check(df, "wealth")
    for row in r.table.head(5).itertuples():
        sub = df[df["O"] == row.O]
        res = sps.linregress(sub["T"], sub["wealth"])
        assert row.slope == pytest.approx(res.slope, rel=1e-9)
        assert row.p_raw == pytest.approx(res.pvalue, rel=1e-6)


def test_randomization_detects_leakage_and_skips_small_strata():
    clean = randomization_check(_strata_frame(5), "wealth")
    leaked = randomization_check(_strata_frame(5, leak=0.5), "wealth")
    assert clean.share_significant <= 0.05
    assert leaked.share_significant > 0.5
    tiny = pd.DataFrame({"A": [1, 1, 2], "N": 1, "O": 1, "T": [1.0, 2.0, 3.0], "x": [1.0, 2.0, 0.0]})
    assert randomization_check(tiny, "x").n_skipped == 2


def test_randomization_table_layout():
    reports = [randomization_check(_strata_frame(1), c) for c in ("wealth", "flat")]
    t = randomization_table(reports)
    assert list(t.columns) == ["A", "N", "O", "attribute", "n", "slope", "p_raw", "p_adj", "significant"]
    assert len(t) == 80


def test_covariate_list_has_eleven_entries():
    assert len(RANDOMIZATION_COVARIATES) == 11
