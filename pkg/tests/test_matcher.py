import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from hongbao.errors import BootstrapInstabilityError, UnidentifiedError
from hongbao.matcher import MATCH_KEY, exact_match, match_panel, matched_contrast, shuffle_sides


def rows(keys, ys, start=0):
    """Rows with the given (A, N, O, T) keys and outcome ``y``."""
    df = pd.DataFrame(list(keys), columns=list(MATCH_KEY))
    df["y"] = np.asarray(ys, dtype=float)
    df["packet_id"] = np.arange(start, start + len(df))
    df["user_id"] = df["packet_id"] + 1000
    df["group_id"] = df["packet_id"] % 7
    return df


K = (1000, 5, 1, 400)


def test_hand_contrast():
    m = exact_match(rows([K, K], [2, 4]), rows([K, K], [1, 3], start=10))
    assert m.n_keys == 1 and m.match_rate == 1.0
    r = matched_contrast(m, "y", reps=0)
    assert r.estimate == pytest.approx(1.0)
    assert (r.n_treated, r.n_control) == (2, 2)


def test_amounts_must_match_to_the_cent():
    m = exact_match(rows([(1000, 5, 1, 199)], [1]), rows([(1000, 5, 1, 200)], [0]))
    assert m.n_keys == 0 and m.match_rate == 0.0 and len(m.table) == 0
    m = exact_match(rows([(1000, 5, 1, 200)], [1]), rows([(1000, 5, 2, 200)], [0]))
    assert m.n_keys == 0


def test_treated_weighting_across_keys():
    K2 = (500, 3, 2, 100)
    lk = rows([K, K2, K2, K2], [1, 5, 5, 5])
    ct = rows([K, K2], [0, 0], start=10)
    r = matched_contrast(exact_match(lk, ct), "y", reps=0)
    assert r.estimate == pytest.approx((1 * 1 + 3 * 5) / 4)
    assert np.isnan(r.se)


def test_unmatched_luckiest_rows_are_dropped():
    lk = rows([K, (1000, 5, 1, 401)], [1, 9])
    m = exact_match(lk, rows([K], [0], start=10))
    assert m.n_luckiest == 2 and m.n_luckiest_matched == 1 and m.match_rate == 0.5
    assert matched_contrast(m, "y", reps=0).estimate == pytest.approx(1.0)


def test_missing_outcomes_dropped_and_unidentified():
    lk = rows([K, K], [1, np.nan])
    m = exact_match(lk, rows([K], [0], start=10))
    assert matched_contrast(m, "y", reps=0).estimate == pytest.approx(1.0)
    with pytest.raises(UnidentifiedError):
        matched_contrast(exact_match(rows([K], [np.nan]), rows([K], [0], start=10)), "y", reps=0)
    with pytest.raises(UnidentifiedError):
        matched_contrast(exact_match(rows([K], [1]), rows([(1, 1, 1, 1)], [0], start=10)), "y", reps=0)


def test_tiny_bootstrap_is_unstable():
    m = exact_match(rows([K, K], [2, 4]), rows([K, K], [1, 3], start=10))
    with pytest.raises(BootstrapInstabilityError):
        matched_contrast(m, "y", reps=200, seed=0)


def test_missing_key_column():
    with pytest.raises(KeyError):
        exact_match(rows([K], [1]).drop(columns="T"), rows([K], [0]))


key_lists = st.lists(st.tuples(st.just(1000), st.integers(2, 3), st.integers(1, 2), st.integers(1, 3)),
                     min_size=1, max_size=25)


@settings(max_examples=100, deadline=None)
@given(key_lists, key_lists, st.integers(0, 2**31))
def test_table_groups_identical_keys(lk_keys, ct_keys, seed):
    g = np.random.default_rng(seed)
    lk = rows(lk_keys, g.normal(size=len(lk_keys)))
    ct = rows(ct_keys, g.normal(size=len(ct_keys)), start=100)
    m = exact_match(lk, ct)
    t = m.table
    per_key = t.groupby("key_id")
    assert (per_key[list(MATCH_KEY)].nunique() == 1).all().all()
    assert (per_key["side"].nunique() == 2).all()
    common = set(lk_keys) & set(ct_keys)
    assert m.n_keys == len(common)
    assert m.n_luckiest_matched == sum(k in common for k in lk_keys)
    assert m.n_controls_matched == sum(k in common for k in ct_keys)


@settings(max_examples=60, deadline=None)
@given(key_lists, key_lists, st.integers(0, 2**31), st.integers(2, 4))
def test_duplicating_controls_leaves_contrast_unchanged(lk_keys, ct_keys, seed, copies):
    g = np.random.default_rng(seed)
    lk = rows(lk_keys, g.normal(size=len(lk_keys)))
    ct = rows(ct_keys, g.normal(size=len(ct_keys)), start=100)
    m = exact_match(lk, ct)
    if m.n_keys == 0:
        return
    dup = exact_match(lk, pd.concat([ct] * copies, ignore_index=True))
    a = matched_contrast(m, "y", reps=0).estimate
    assert matched_contrast(dup, "y", reps=0).estimate == pytest.approx(a, abs=1e-12)


def test_shuffle_preserves_counts_and_kills_the_effect():
    g = np.random.default_rng(0)
    keys = [(1000, 5, 1, int(t)) for t in g.integers(100, 110, 600)]
    lk = rows(keys[:200], 1.0 + g.normal(size=200))
    ct = rows(keys[200:], g.normal(size=400), start=1000)
    m = exact_match(lk, ct)
    assert matched_contrast(m, "y", reps=0).estimate == pytest.approx(1.0, abs=0.25)
    placebo = [matched_contrast(shuffle_sides(m, np.random.default_rng(s)), "y", reps=0).estimate
               for s in range(40)]
    assert abs(np.mean(placebo)) < 0.1
    sh = shuffle_sides(m, np.random.default_rng(1))
    assert (sh.table.groupby("key_id")["side"].sum() == m.table.groupby("key_id")["side"].sum()).all()


def test_bootstrap_interval_and_clusters():
    g = np.random.default_rng(2)
    keys = [(1000, 5, 1, int(t)) for t in g.integers(100, 120, 900)]
    lk = rows(keys[:300], 0.5 + g.normal(size=300))
    ct = rows(keys[300:], g.normal(size=600), start=1000)
    m = exact_match(lk, ct)
    r = matched_contrast(m, "y", reps=300, seed=4)
    assert r.ci_lo < r.estimate < r.ci_hi and r.covers(0.5) and r.excludes_zero()
    clusters = pd.Series(np.arange(7), index=pd.Index(np.arange(7), name="group_id"))
    rc = matched_contrast(m, "y", clusters=clusters, reps=300, seed=4)
    assert rc.estimate == pytest.approx(r.estimate, rel=1e-12)
    assert rc == matched_contrast(m, "y", clusters=clusters, reps=300, seed=4)


def test_match_panel_on_simulated_rows(small_world):
    _, _, panel = small_world
    m = match_panel(panel)
    assert 0 < m.match_rate <= 1
    assert m.n_luckiest == int(panel["luckiest"].sum())
    t = m.table
    assert (t.loc[t["side"] == 1, "luckiest"] == 1).all() and (t.loc[t["side"] == 0, "luckiest"] == 0).all()
