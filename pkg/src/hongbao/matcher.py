"""Exact one-to-many matching of luckiest-draw recipients.

Each luckiest row is matched to every non-luckiest row with the same total
amount, recipient count, order and amount received (cents, exact).  The
contrast is the per-key mean difference, averaged over keys with weights equal
to the number of luckiest rows (the effect on the treated).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import sparse
from scipy import stats as sps

from .errors import BootstrapInstabilityError, UnidentifiedError
from .estimator import MAX_SKIP_SHARE, _row_clusters, _weight_batches, column_values

MATCH_KEY = ("A", "N", "O", "T")


@dataclass
class MatchResult:
    """Matched rows of both sides.

    ``table`` holds the key columns, ``side`` (1 luckiest, 0 control),
    ``key_id`` and every other column of the input rows, for matched keys only.
    """

    table: pd.DataFrame
    n_keys: int
    n_luckiest: int
    n_luckiest_matched: int
    n_controls_matched: int

    @property
    def match_rate(self) -> float:
        return self.n_luckiest_matched / self.n_luckiest if self.n_luckiest else 0.0

    def to_csv(self, path, outcomes=()) -> None:
        cols = ["key_id", *MATCH_KEY, "side", "user_id", "packet_id", *outcomes]
        cols = [c for c in cols if c in self.table.columns]
        self.table[cols].to_csv(path, index=False)


def exact_match(luckiest_rows: pd.DataFrame, non_luckiest_rows: pd.DataFrame, key=MATCH_KEY) -> MatchResult:
    """Group both sides by the exact key; keep keys present on both sides."""
    key = list(key)
    for df in (luckiest_rows, non_luckiest_rows):
        missing = [k for k in key if k not in df.columns]
        if missing:
            raise KeyError(f"rows lack match columns {missing}")
    lk = luckiest_rows.assign(side=1)
    ct = non_luckiest_rows.assign(side=0)
    both = pd.concat([lk, ct], ignore_index=True)
    for k in key:
        both[k] = both[k].astype(np.int64)
    sides = both.groupby(key, sort=True)["side"].agg(["min", "max"])
    matched_keys = sides[(sides["min"] == 0) & (sides["max"] == 1)].index
    kid = pd.Series(np.arange(len(matched_keys)), index=matched_keys, name="key_id")
    table = both.join(kid, on=key, how="inner")
    table = table.sort_values(["key_id", "side", *[c for c in ("packet_id", "user_id") if c in table]],
                              ascending=[True, False] + [True] * len([c for c in ("packet_id", "user_id")
                                                                      if c in table]),
                              kind="stable").reset_index(drop=True)
    n_l = int((table["side"] == 1).sum())
    return MatchResult(table, len(matched_keys), len(luckiest_rows), n_l, int((table["side"] == 0).sum()))


@dataclass
class ContrastReport:
    outcome: str
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    pvalue: float
    n_keys: int
    n_treated: int
    n_control: int
    reps: int
    n_skipped: int

    def covers(self, value: float) -> bool:
        return self.ci_lo <= value <= self.ci_hi

    def excludes_zero(self) -> bool:
        return not self.covers(0.0)


def _contrast_from_sums(nL, yL, nC, yC):
    """ATT-weighted mean difference from per-key counts and sums, batched over rows."""
    ok = (nL > 0) & (nC > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = np.where(ok, yL / np.where(ok, nL, 1) - yC / np.where(ok, nC, 1), 0.0)
        w = np.where(ok, nL, 0.0)
        tot = w.sum(axis=-1)
        return np.where(tot > 0, (w * diff).sum(axis=-1) / np.where(tot > 0, tot, 1), np.nan)


def matched_contrast(matched: MatchResult, outcome: str, *, clusters=None, reps: int = 1000,
                     seed: int = 0) -> ContrastReport:
    """Luckiest-minus-control mean of ``outcome`` with a cluster bootstrap CI.

    Rows with a missing outcome (conditional outcomes) are dropped first.
    Amount outcomes are in CNY.  Without ``clusters`` each row is its own
    cluster.
    """
    t = matched.table
    y = column_values(t, outcome)
    ok = np.isfinite(y)
    t, y = t[ok], y[ok]
    if len(t) == 0:
        raise UnidentifiedError("no matched keys")
    cl, k = _row_clusters(t, clusters) if clusters is not None else (np.arange(len(t)), len(t))
    key = t["key_id"].to_numpy()
    side = t["side"].to_numpy()
    _, kk = np.unique(key, return_inverse=True)
    n_keys = int(kk.max()) + 1
    # cells: (cluster, key, side)
    cell_key = (cl.astype(np.int64) * n_keys + kk) * 2 + side
    ucell, cell = np.unique(cell_key, return_inverse=True)
    c_n = np.bincount(cell).astype(np.float64)
    c_y = np.bincount(cell, y)
    c_cl = (ucell // 2) // n_keys
    c_ks = ucell % (2 * n_keys)  # key * 2 + side
    agg = sparse.csr_matrix((np.ones(len(ucell)), (np.arange(len(ucell)), c_ks)), shape=(len(ucell), 2 * n_keys))
    nn = agg.T @ c_n
    yy = agg.T @ c_y
    est = float(_contrast_from_sums(nn[1::2], yy[1::2], nn[0::2], yy[0::2]))
    if not np.isfinite(est):
        raise UnidentifiedError("no key has both sides after dropping missing outcomes")
    n_keys_both = int(((nn[1::2] > 0) & (nn[0::2] > 0)).sum())
    out = np.empty(reps)
    for start, W in _weight_batches(seed, reps, k):
        Wc = W[:, c_cl]
        bn = (agg.T @ (Wc * c_n).T).T
        by = (agg.T @ (Wc * c_y).T).T
        out[start:start + len(W)] = _contrast_from_sums(bn[:, 1::2], by[:, 1::2], bn[:, 0::2], by[:, 0::2])
    valid = out[np.isfinite(out)]
    skipped = reps - len(valid)
    if reps and skipped > MAX_SKIP_SHARE * reps:
        raise BootstrapInstabilityError(f"{skipped} of {reps} replicates had no matched key")
    if reps:
        se = float(valid.std(ddof=1))
        lo, hi = (float(v) for v in np.percentile(valid, [2.5, 97.5]))
        z = abs(est) / se if se > 0 else (0.0 if est == 0 else np.inf)
        p = float(2.0 * sps.norm.sf(z))
    else:
        se = lo = hi = p = float("nan")
    return ContrastReport(outcome, est, se, lo, hi, p, n_keys_both, int((side == 1).sum()), int((side == 0).sum()),
                          reps, skipped)


def shuffle_sides(matched: MatchResult, rng: np.random.Generator) -> MatchResult:
    """Placebo: permute the luckiest/control labels within each key (counts preserved)."""
    t = matched.table.copy()
    key = t["key_id"].to_numpy()
    side = t["side"].to_numpy().copy()
    order = np.argsort(key, kind="stable")
    ks = key[order]
    cut = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1], True])
    for a, b in zip(cut[:-1], cut[1:]):
        idx = order[a:b]
        side[idx] = rng.permutation(side[idx])
    t["side"] = side
    return MatchResult(t, matched.n_keys, matched.n_luckiest, matched.n_luckiest_matched, matched.n_controls_matched)


def match_panel(panel: pd.DataFrame) -> MatchResult:
    """Exact matching of the panel's luckiest rows against all other rows."""
    return exact_match(panel[panel["luckiest"] == 1], panel[panel["luckiest"] == 0])
