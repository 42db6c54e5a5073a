"""Stratified fixed-effects OLS, Poisson cluster bootstrap and derived regressions.

Stratum fixed effects are absorbed by demeaning within each stratum, never by
dummy columns.  Every regression here is computed from a compact table of
*cells*, one per (cluster, stratum[, group size]) combination, holding the
count, sums and cross-products of the centered variables.  A bootstrap
replicate only reweights cells by its cluster weights, so the point estimate
and all replicates share one code path (a replicate with unit weights is the
point estimate exactly).

Coefficients are per CNY: the treatment and amount outcomes (overall,
intensive, direct, indirect, other-group and k-th packet amounts) are divided
by 100 before fitting; indicators are used as is.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
import pandas as pd
from scipy import sparse
from scipy import stats as sps
from scipy.sparse.csgraph import connected_components

from ._rng import substream
from .errors import BootstrapInstabilityError, InvalidSpecError, UnidentifiedError
from .stats import STRATUM

AMOUNT_PREFIXES = ("overall", "intensive", "direct", "indirect", "other_groups", "kth_overall", "kth_intensive",
                   "T", "A")
MAX_SKIP_SHARE = 0.10
BATCH = 50


def is_amount(name: str) -> bool:
    return any(name == p or name.startswith(p + "_") for p in AMOUNT_PREFIXES)


def column_values(rows: pd.DataFrame, name: str) -> np.ndarray:
    """Column as float, converted from cents to CNY for amount columns."""
    v = rows[name].to_numpy(dtype=np.float64)
    return v / 100.0 if is_amount(name) else v


# -- reports -------------------------------------------------------------------

@dataclass
class EstimateReport:
    """Coefficients of one regression with their uncertainty.

    ``se`` is the bootstrap replicate standard deviation (classical OLS SE when
    no bootstrap was run), the CI is the 2.5/97.5 replicate percentiles
    (normal when classical) and ``pvalue`` the normal bootstrap-t p-value.
    """

    names: list
    coef: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    pvalue: np.ndarray
    n_obs: int
    n_strata: int
    adj_r2: float
    reps: int = 0
    n_skipped: int = 0
    method: str = "classical"
    outcome: str = ""
    replicates: np.ndarray = field(default=None, repr=False)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no coefficient named {name!r}; have {self.names}") from None

    def __getitem__(self, name: str) -> dict:
        k = self.index(name)
        return {"estimate": float(self.coef[k]), "se": float(self.se[k]), "ci_lo": float(self.ci_lo[k]),
                "ci_hi": float(self.ci_hi[k]), "pvalue": float(self.pvalue[k])}

    @property
    def beta(self) -> float:
        return float(self.coef[0])

    @property
    def ci(self) -> tuple:
        return float(self.ci_lo[0]), float(self.ci_hi[0])

    def covers(self, value: float, name: str | None = None) -> bool:
        k = 0 if name is None else self.index(name)
        return bool(self.ci_lo[k] <= value <= self.ci_hi[k])

    def excludes_zero(self, name: str | None = None) -> bool:
        return not self.covers(0.0, name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "name": self.names, "estimate": self.coef, "se": self.se, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi,
            "n_obs": self.n_obs, "n_strata": self.n_strata, "adj_r2": self.adj_r2, "p_value": self.pvalue,
            "reps": self.reps, "method": self.method})


@dataclass
class BootstrapResult:
    estimate: np.ndarray
    replicates: np.ndarray  # (reps, k); skipped replicates are NaN
    n_skipped: int

    @property
    def valid(self) -> np.ndarray:
        return self.replicates[~np.isnan(self.replicates).any(axis=1)]

    @property
    def se(self) -> np.ndarray:
        return self.valid.std(axis=0, ddof=1)

    @property
    def ci(self) -> tuple:
        v = self.valid
        return np.percentile(v, 2.5, axis=0), np.percentile(v, 97.5, axis=0)

    @property
    def pvalue(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, np.abs(self.estimate) / se, np.where(self.estimate == 0, 0.0, np.inf))
        return 2.0 * sps.norm.sf(z)


# -- clusters --------------------------------------------------------------------

def build_clusters(pop) -> pd.Series:
    """Cluster id per group: connected components of the group-user membership graph.

    Ids are dense, numbered in order of each component's smallest group id.
    """
    ms = pop.memberships
    gids = np.sort(pop.groups["group_id"].to_numpy())
    users = np.unique(ms["user_id"].to_numpy())
    gi = np.searchsorted(gids, ms["group_id"].to_numpy())
    ui = np.searchsorted(users, ms["user_id"].to_numpy()) + len(gids)
    n = len(gids) + len(users)
    adj = sparse.coo_matrix((np.ones(len(gi)), (gi, ui)), shape=(n, n)).tocsr()
    _, labels = connected_components(adj, directed=False)
    glab = labels[: len(gids)]
    # renumber by first appearance over sorted group ids
    _, first = np.unique(glab, return_index=True)
    rank = np.empty(glab.max() + 1, dtype=np.int64)
    rank[glab[np.sort(first)]] = np.arange(len(first))
    return pd.Series(rank[glab], index=pd.Index(gids, name="group_id"), name="cluster_id")


def _row_clusters(rows: pd.DataFrame, clusters) -> tuple[np.ndarray, int]:
    if clusters is None:
        return np.zeros(len(rows), dtype=np.int64), 1
    if isinstance(clusters, pd.Series):
        c = rows["group_id"].map(clusters)
        if c.isna().any():
            raise KeyError("rows refer to groups without a cluster")
        c = c.to_numpy(dtype=np.int64)
        return c, int(clusters.max()) + 1
    c = np.asarray(clusters, dtype=np.int64)
    if c.shape != (len(rows),):
        raise ValueError("cluster array must have one entry per row")
    return c, int(c.max()) + 1 if len(c) else 1


def poisson_weights(seed: int, rep: int, n_clusters: int) -> np.ndarray:
    """Poisson(1) weight per cluster for replicate ``rep`` (its own substream)."""
    return substream(seed, "bootstrap", rep).poisson(1.0, n_clusters).astype(np.float64)


def _weight_batches(seed: int, reps: int, n_clusters: int):
    for start in range(0, reps, BATCH):
        stop = min(reps, start + BATCH)
        yield start, np.stack([poisson_weights(seed, r, n_clusters) for r in range(start, stop)])


# -- the cell-moment engine ----------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _within_moments(W, cell_cl, cell_sg, sg_s, s_start, sg_g, G, cell_n, cell_S, cell_Q):
    """Within-stratum cross-products for each row of cluster weights ``W``.

    Returns ``(XX, XD, DD)``: the weighted within-stratum cross-products of
    the variables, of the variables with the group-size dummies, and of the
    dummies.
    """
    B = W.shape[0]
    n_cells = cell_cl.shape[0]
    n_sg = sg_s.shape[0]
    n_s = s_start.shape[0] - 1
    d = cell_S.shape[1]
    XX = np.zeros((B, d, d))
    XD = np.zeros((B, d, G))
    DD = np.zeros((B, G, G))
    acc_n = np.zeros(n_sg)
    acc_S = np.zeros((n_sg, d))
    acc_Q = np.zeros((n_s, d, d))
    Ss = np.zeros(d)
    for b in range(B):
        acc_n[:] = 0.0
        acc_S[:, :] = 0.0
        acc_Q[:, :, :] = 0.0
        for c in range(n_cells):
            w = W[b, cell_cl[c]]
            if w == 0.0:
                continue
            k = cell_sg[c]
            acc_n[k] += w * cell_n[c]
            s = sg_s[k]
            for i in range(d):
                acc_S[k, i] += w * cell_S[c, i]
                for j in range(i, d):
                    acc_Q[s, i, j] += w * cell_Q[c, i, j]
        for s in range(n_s):
            ns = 0.0
            Ss[:] = 0.0
            for k in range(s_start[s], s_start[s + 1]):
                ns += acc_n[k]
                for i in range(d):
                    Ss[i] += acc_S[k, i]
            if ns <= 0.0:
                continue
            for i in range(d):
                for j in range(i, d):
                    XX[b, i, j] += acc_Q[s, i, j] - Ss[i] * Ss[j] / ns
            if G > 0:
                for k in range(s_start[s], s_start[s + 1]):
                    g = sg_g[k]
                    nk = acc_n[k]
                    if nk == 0.0:
                        continue
                    for i in range(d):
                        XD[b, i, g] += acc_S[k, i] - Ss[i] * nk / ns
                    DD[b, g, g] += nk
                    for k2 in range(s_start[s], s_start[s + 1]):
                        DD[b, g, sg_g[k2]] -= nk * acc_n[k2] / ns
        for i in range(d):
            for j in range(i):
                XX[b, i, j] = XX[b, j, i]
    return XX, XD, DD


class FEStatistic:
    """Stratified fixed-effects OLS prepared for repeated reweighting.

    ``names`` label the regressors (columns of ``X``); the outcome ``y`` is
    appended as the last variable.  ``strata`` and ``gsize`` are integer codes
    per row; ``cluster`` the cluster code per row (``n_clusters`` in total).
    """

    def __init__(self, y, X, names, strata, cluster, n_clusters, gsize=None):
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
        ok = np.isfinite(y) & np.isfinite(X).all(axis=1)
        self.names = list(names)
        self.p = X.shape[1]
        y, X = y[ok], X[ok]
        s = np.asarray(strata)[ok]
        cl = np.asarray(cluster, dtype=np.int64)[ok]
        g = np.zeros(len(y), dtype=np.int64) if gsize is None else np.asarray(gsize)[ok]
        self.n_obs = len(y)
        self.n_clusters = int(n_clusters)
        self.group_fe = gsize is not None
        _, s = np.unique(s, return_inverse=True)
        _, g = np.unique(g, return_inverse=True)
        s = s.astype(np.int64)
        g = g.astype(np.int64)
        self.n_strata = int(s.max()) + 1 if len(s) else 0
        self.G = int(g.max()) + 1 if (self.group_fe and len(g)) else 0
        Z = np.column_stack([X, y])
        self.d = Z.shape[1]
        # unweighted centering within strata keeps the cross-products well conditioned
        if len(y):
            cnt = np.bincount(s, minlength=self.n_strata)
            for j in range(self.d):
                Z[:, j] -= (np.bincount(s, Z[:, j], self.n_strata) / cnt)[s]
        self.tss_y = float(np.sum((y - y.mean()) ** 2)) if len(y) else 0.0
        self.ss_x = np.array([float(np.sum((X[:, j] - X[:, j].mean()) ** 2)) for j in range(self.p)]) \
            if len(y) else np.zeros(self.p)

        # cells: unique (cluster, stratum, group size)
        span_s = max(self.n_strata, 1)
        span_g = max(self.G, 1)
        key = (cl * span_s + s) * span_g + (g if self.group_fe else 0)
        ukey, cell = np.unique(key, return_inverse=True)
        n_cells = len(ukey)
        self.cell_cl = (ukey // span_g) // span_s
        cell_s = (ukey // span_g) % span_s
        cell_g = ukey % span_g
        self.cell_n = np.bincount(cell, minlength=n_cells).astype(np.float64)
        self.cell_S = np.column_stack([np.bincount(cell, Z[:, j], n_cells) for j in range(self.d)]) \
            if n_cells else np.zeros((0, self.d))
        Q = np.zeros((n_cells, self.d, self.d))
        for i in range(self.d):
            for j in range(i, self.d):
                Q[:, i, j] = np.bincount(cell, Z[:, i] * Z[:, j], n_cells)
        self.cell_Q = Q
        # (stratum, group size) index sorted by stratum
        sg_key = cell_s * span_g + cell_g
        usg, self.cell_sg = np.unique(sg_key, return_inverse=True)
        self.sg_s = (usg // span_g).astype(np.int64)
        self.sg_g = (usg % span_g).astype(np.int64)
        self.s_start = np.searchsorted(self.sg_s, np.arange(self.n_strata + 1)).astype(np.int64)
        self.cell_sg = self.cell_sg.astype(np.int64)
        self.cell_cl = self.cell_cl.astype(np.int64)

    # moments -> coefficients
    def _reduced(self, W):
        XX, XD, DD = _within_moments(np.ascontiguousarray(W, dtype=np.float64), self.cell_cl, self.cell_sg,
                                     self.sg_s, self.s_start, self.sg_g, self.G, self.cell_n, self.cell_S,
                                     self.cell_Q)
        if self.G > 1:
            P = np.linalg.pinv(DD, rcond=1e-10, hermitian=True)
            XX = XX - XD @ P @ np.transpose(XD, (0, 2, 1))
            rank_d = np.linalg.matrix_rank(DD[0], tol=1e-9 * max(1.0, float(np.abs(DD[0]).max())))
        else:
            rank_d = 0
        return XX, rank_d

    def _solve(self, M):
        """Coefficients from reduced moments ``M`` (B, d, d); NaN rows where unidentified."""
        p = self.p
        A = M[:, :p, :p]
        b = M[:, :p, p]
        out = np.full((M.shape[0], p), np.nan)
        ref = np.maximum(self.ss_x, 1e-300)
        for k in range(M.shape[0]):
            diag = np.diag(A[k])
            if np.any(diag <= 1e-10 * ref) or not np.all(np.isfinite(A[k])):
                continue
            sc = 1.0 / np.sqrt(diag)
            As = A[k] * sc[:, None] * sc[None, :]
            if np.linalg.eigvalsh(As).min() < 1e-10:
                continue
            out[k] = np.linalg.solve(As, b[k] * sc) * sc
        return out

    def replicate(self, W) -> np.ndarray:
        """Coefficients for each row of cluster weights ``W`` (B, n_clusters)."""
        M, _ = self._reduced(W)
        return self._solve(M)

    def fit(self):
        """Point estimate with classical standard errors and adjusted R^2."""
        if self.n_obs == 0:
            raise UnidentifiedError("no usable rows")
        M, rank_d = self._reduced(np.ones((1, self.n_clusters)))
        beta = self._solve(M)[0]
        if np.isnan(beta).any():
            raise UnidentifiedError(self._why_unidentified(M[0]))
        p = self.p
        rss = max(float(M[0, p, p] - M[0, :p, p] @ beta), 0.0)
        k_abs = self.n_strata + rank_d
        dof = self.n_obs - p - k_abs
        if dof > 0:
            cov = rss / dof * np.linalg.inv(M[0, :p, :p])
            se = np.sqrt(np.maximum(np.diag(cov), 0.0))
        else:
            se = np.full(p, np.nan)
        r2 = 1.0 - rss / self.tss_y if self.tss_y > 0 else (1.0 if rss == 0 else 0.0)
        n_par = p + k_abs
        adj = 1.0 - (1.0 - r2) * (self.n_obs - 1) / (self.n_obs - n_par) if self.n_obs > n_par else np.nan
        return beta, se, float(adj), max(dof, 0)

    def _why_unidentified(self, M) -> str:
        diag = np.diag(M[: self.p, : self.p])
        flat = [n for n, v, r in zip(self.names, diag, self.ss_x) if v <= 1e-10 * max(r, 1e-300)]
        if flat:
            return f"no within-stratum variation in {', '.join(flat)}"
        return f"collinear regressors among {', '.join(self.names)}"


def _stratum_codes(rows: pd.DataFrame, strata) -> np.ndarray:
    strata = list(strata)
    if not strata:
        return np.zeros(len(rows), dtype=np.int64)
    return rows.groupby(strata, sort=True, dropna=False).ngroup().to_numpy(np.int64)


def _bootstrap(stat: FEStatistic, reps: int, seed: int, workers: int = 1) -> BootstrapResult:
    if reps < 1:
        raise ValueError("reps must be >= 1")
    est = stat.fit()[0]
    out = np.empty((reps, stat.p))

    def run(job):
        start, W = job
        return start, stat.replicate(W)

    jobs = _weight_batches(seed, reps, stat.n_clusters)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for start, vals in results:
        out[start:start + len(vals)] = vals
    skipped = int(np.isnan(out).any(axis=1).sum())
    if skipped > MAX_SKIP_SHARE * reps:
        raise BootstrapInstabilityError(f"{skipped} of {reps} bootstrap replicates had no identifying variation")
    return BootstrapResult(est, out, skipped)


def _report(stat: FEStatistic, outcome: str, clusters_given: bool, reps: int, seed: int, workers: int,
            ) -> EstimateReport:
    beta, se_c, adj, dof = stat.fit()
    if reps and clusters_given:
        bs = _bootstrap(stat, reps, seed, workers)
        lo, hi = bs.ci
        return EstimateReport(stat.names, beta, bs.se, lo, hi, bs.pvalue, stat.n_obs, stat.n_strata, adj,
                              reps, bs.n_skipped, "bootstrap", outcome, bs.replicates)
    q = sps.t.ppf(0.975, max(dof, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se_c > 0, np.abs(beta) / se_c, np.where(beta == 0, 0.0, np.inf))
    p = 2.0 * sps.t.sf(tstat, max(dof, 1))
    return EstimateReport(stat.names, beta, se_c, beta - q * se_c, beta + q * se_c, p, stat.n_obs,
                          stat.n_strata, adj, 0, 0, "classical", outcome)


def _statistic(rows, outcome, regressors, strata, clusters, group_size_fe=False, treatment="T"):
    if len(rows) == 0:
        raise InvalidSpecError("no rows")
    y = column_values(rows, outcome)
    cols, names = [], []
    for r in regressors:
        if isinstance(r, tuple):  # (name, values)
            names.append(r[0])
            cols.append(np.asarray(r[1], dtype=np.float64))
        else:
            names.append(r)
            cols.append(column_values(rows, r))
    X = np.column_stack(cols)
    cl, k = _row_clusters(rows, clusters)
    g = rows["group_size"].to_numpy() if group_size_fe else None
    return FEStatistic(y, X, names, _stratum_codes(rows, strata), cl, k, g)


# -- public estimators -------------------------------------------------------------

def stratified_fe_ols(rows: pd.DataFrame, outcome: str, extra_regressors=(), *, strata=STRATUM,
                      clusters=None, reps: int = 0, seed: int = 0, treatment: str = "T",
                      group_size_fe: bool = False, workers: int = 1) -> EstimateReport:
    """OLS of ``outcome`` on the treatment with stratum fixed effects absorbed.

    Rows with a missing outcome or regressor are dropped, so conditional
    outcomes (intensive margin) select their own sample.  With ``clusters``
    and ``reps > 0`` the uncertainty comes from the Poisson cluster bootstrap,
    otherwise from classical OLS formulas.  Raises ``UnidentifiedError`` when
    no stratum has treatment variation.
    """
    stat = _statistic(rows, outcome, [treatment, *extra_regressors], strata, clusters, group_size_fe)
    return _report(stat, outcome, clusters is not None, reps, seed, workers)


def naive_ols(rows: pd.DataFrame, outcome: str, *, clusters=None, reps: int = 0, seed: int = 0,
              treatment: str = "T", workers: int = 1) -> EstimateReport:
    """Pooled OLS of ``outcome`` on the treatment with an intercept and no strata."""
    stat = _statistic(rows, outcome, [treatment], (), clusters)
    return _report(stat, outcome, clusters is not None, reps, seed, workers)


def linear_spec_ols(rows: pd.DataFrame, outcome: str, *, clusters=None, reps: int = 0, seed: int = 0,
                    treatment: str = "T", workers: int = 1) -> EstimateReport:
    """OLS with an intercept and A, N, O entered linearly instead of as strata."""
    if len(rows) < 5:
        raise InvalidSpecError("linear_spec_ols needs at least 5 rows")
    stat = _statistic(rows, outcome, [treatment, "A", "N", "O"], (), clusters)
    return _report(stat, outcome, clusters is not None, reps, seed, workers)


def interaction_regression(rows: pd.DataFrame, outcome: str, moderators, *, include_group_size_fe: bool = True,
                           strata=STRATUM, clusters=None, reps: int = 0, seed: int = 0, treatment: str = "T",
                           workers: int = 1) -> EstimateReport:
    """Stratified FE regression with moderator main effects and treatment interactions.

    Coefficients are named ``T``, each moderator, and ``T:moderator``.
    """
    moderators = list(moderators)
    if not moderators:
        raise InvalidSpecError("at least one moderator is required")
    t = column_values(rows, treatment)
    regs = [treatment]
    for m in moderators:
        regs.append((m, rows[m].to_numpy(np.float64)))
    for m in moderators:
        regs.append((f"{treatment}:{m}", t * rows[m].to_numpy(np.float64)))
    stat = _statistic(rows, outcome, regs, strata, clusters, include_group_size_fe)
    return _report(stat, outcome, clusters is not None, reps, seed, workers)


def luckiest_rows(panel: pd.DataFrame) -> pd.DataFrame:
    """Rows of luckiest-draw recipients whose packet has a second share."""
    return panel[(panel["luckiest"] == 1) & panel["Z"].notna()]


def inequity_regression(rows: pd.DataFrame, outcome: str, *, strata=STRATUM, clusters=None, reps: int = 0,
                        seed: int = 0, treatment: str = "T", workers: int = 1) -> EstimateReport:
    """Stratified FE regression of luckiest recipients' behaviour on T and the ratio Z.

    ``rows`` must already be restricted with :func:`luckiest_rows`; rows with
    an undefined ratio are rejected.
    """
    if rows["Z"].isna().any():
        raise InvalidSpecError(f"{int(rows['Z'].isna().sum())} rows have an undefined ratio Z")
    if "luckiest" in rows and (rows["luckiest"] != 1).any():
        raise InvalidSpecError("inequity_regression expects luckiest-draw rows only")
    return stratified_fe_ols(rows, outcome, ["Z"], strata=strata, clusters=clusters, reps=reps, seed=seed,
                             treatment=treatment, workers=workers)


@dataclass
class SubsampleContrast:
    labels: tuple
    first: EstimateReport
    second: EstimateReport
    difference: float
    se: float
    ci_lo: float
    ci_hi: float
    pvalue: float
    n_skipped: int


def subsample_difference_test(rows: pd.DataFrame, label, outcome: str, *, clusters, reps: int = 1000,
                              seed: int = 0, strata=STRATUM, treatment: str = "T",
                              workers: int = 1) -> SubsampleContrast:
    """Treatment effect in two subsamples and a bootstrap test of their difference.

    ``label`` is a column name or a per-row array with exactly two distinct
    values.  Both subsamples are reweighted by the same cluster weights in
    each replicate; the p-value is the normal bootstrap-t of the difference.
    """
    lab = rows[label].to_numpy() if isinstance(label, str) else np.asarray(label)
    if lab.shape != (len(rows),):
        raise ValueError("label must have one entry per row")
    values = pd.unique(lab[~pd.isna(lab)])
    values = sorted(values.tolist(), reverse=True)
    if len(values) != 2:
        raise InvalidSpecError(f"label must split the rows into two non-empty subsamples, got {len(values)}")
    stats_ = []
    for v in values:
        sub = rows[lab == v]
        if len(sub) == 0:
            raise InvalidSpecError(f"subsample {v!r} is empty")
        stats_.append(_statistic(sub, outcome, [treatment], strata, clusters))
    return _joint_difference(stats_[0], stats_[1], tuple(values), outcome, reps, seed)


def specification_difference_test(rows: pd.DataFrame, outcome: str, *, clusters, reps: int = 1000,
                                  seed: int = 0, strata=STRATUM, treatment: str = "T") -> SubsampleContrast:
    """Linear-specification minus stratified treatment coefficient, bootstrapped jointly.

    Both regressions use the same rows and the same cluster weights in every
    replicate, so the interval reflects the sampling error of the gap itself.
    """
    if len(rows) < 5:
        raise InvalidSpecError("specification_difference_test needs at least 5 rows")
    lin = _statistic(rows, outcome, [treatment, "A", "N", "O"], (), clusters)
    fe = _statistic(rows, outcome, [treatment], strata, clusters)
    return _joint_difference(lin, fe, ("linear", "stratified"), outcome, reps, seed)


def _joint_difference(first: FEStatistic, second: FEStatistic, labels: tuple, outcome: str, reps: int,
                      seed: int) -> SubsampleContrast:
    """First-minus-second treatment coefficient with both reweighted by the same replicates."""
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if first.n_clusters != second.n_clusters:
        raise ValueError("the two fits disagree on the cluster universe")
    b1, b2 = first.fit()[0][0], second.fit()[0][0]
    r1 = np.empty(reps)
    r2 = np.empty(reps)
    for start, W in _weight_batches(seed, reps, first.n_clusters):
        a = first.replicate(W)[:, 0]
        b = second.replicate(W)[:, 0]
        r1[start:start + len(a)] = a
        r2[start:start + len(b)] = b
    diffs = r1 - r2
    ok = np.isfinite(diffs)
    skipped = int((~ok).sum())
    if skipped > MAX_SKIP_SHARE * reps:
        raise BootstrapInstabilityError(f"{skipped} of {reps} joint replicates were unidentified")
    reports = []
    for st, rr in zip((first, second), (r1, r2)):
        beta, _, adj, _ = st.fit()
        bs = BootstrapResult(beta, rr[:, None].copy(), int(np.isnan(rr).sum()))
        lo, hi = bs.ci
        reports.append(EstimateReport(st.names, beta, bs.se, lo, hi, bs.pvalue, st.n_obs, st.n_strata, adj,
                                      reps, bs.n_skipped, "bootstrap", outcome, bs.replicates))
    d = b1 - b2
    sd = float(diffs[ok].std(ddof=1))
    z = abs(d) / sd if sd > 0 else (0.0 if d == 0 else np.inf)
    lo, hi = np.percentile(diffs[ok], [2.5, 97.5])
    return SubsampleContrast(labels, reports[0], reports[1], float(d), sd, float(lo), float(hi),
                             float(2.0 * sps.norm.sf(z)), skipped)


def poisson_cluster_bootstrap(rows: pd.DataFrame, clusters, statistic, reps: int = 1000, seed: int = 0,
                              workers: int = 1) -> BootstrapResult:
    """Poisson(1) cluster bootstrap of an arbitrary weighted statistic.

    ``statistic(rows, weights)`` returns a scalar or a vector; ``weights`` has
    one entry per row (the weight of its cluster).  A :class:`FEStatistic`
    is accepted too and uses the fast cell path.  Replicates returning NaN are
    skipped; more than 10% skipped raises ``BootstrapInstabilityError``.
    """
    if reps < 100:
        raise ValueError("poisson_cluster_bootstrap needs reps >= 100")
    if isinstance(statistic, FEStatistic):
        return _bootstrap(statistic, reps, seed, workers)
    cl, k = _row_clusters(rows, clusters)
    est = np.atleast_1d(np.asarray(statistic(rows, np.ones(len(rows))), dtype=np.float64))
    out = np.empty((reps, est.size))
    for r in range(reps):
        w = poisson_weights(seed, r, k)[cl]
        try:
            val = np.atleast_1d(np.asarray(statistic(rows, w), dtype=np.float64))
        except (UnidentifiedError, ZeroDivisionError, np.linalg.LinAlgError):
            val = np.full(est.size, np.nan)
        out[r] = val
    skipped = int(np.isnan(out).any(axis=1).sum())
    if skipped > MAX_SKIP_SHARE * reps:
        raise BootstrapInstabilityError(f"{skipped} of {reps} bootstrap replicates had no identifying variation")
    return BootstrapResult(est, out, skipped)


def weighted_fe_slope(rows: pd.DataFrame, weights, outcome: str, extra_regressors=(), *, strata=STRATUM,
                      treatment: str = "T") -> np.ndarray:
    """Weighted within-stratum OLS computed row by row (the reference implementation).

    Used as the generic bootstrap statistic and to cross-check the cell
    engine.  Returns the coefficient vector (treatment first).
    """
    names = [treatment, *extra_regressors]
    y = column_values(rows, outcome)
    X = np.column_stack([column_values(rows, n) for n in names])
    w = np.asarray(weights, dtype=np.float64)
    ok = np.isfinite(y) & np.isfinite(X).all(axis=1) & (w > 0)
    y, X, w = y[ok], X[ok], w[ok]
    s = _stratum_codes(rows[ok], strata)
    ns = int(s.max()) + 1 if len(s) else 0
    sw = np.bincount(s, w, ns)
    yc = y - (np.bincount(s, w * y, ns) / sw)[s]
    Xc = X - np.column_stack([(np.bincount(s, w * X[:, j], ns) / sw)[s] for j in range(X.shape[1])])
    A = Xc.T @ (w[:, None] * Xc)
    diag = np.diag(A)
    ref = np.array([np.sum((X[:, j] - X[:, j].mean()) ** 2) for j in range(X.shape[1])])
    if len(y) == 0 or np.any(diag <= 1e-10 * np.maximum(ref, 1e-300)):
        return np.full(X.shape[1], np.nan)
    return np.linalg.solve(A, Xc.T @ (w * yc))
