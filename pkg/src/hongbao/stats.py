"""Two-sample KS test, Benjamini-Hochberg adjustment and per-stratum randomization checks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats as sps

STRATUM = ("A", "N", "O")

# The eleven pre-treatment covariates checked against the amount received.
RANDOMIZATION_COVARIATES = (
    "female", "age", "degree", "fricnt", "joincnt",
    "history_sendamt", "history_sendcnt", "history_recvamt", "history_recvcnt",
    "groupamt", "groupnum",
)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    n_x: int
    n_y: int


def kolmogorov_sf(lam: float, terms: int = 100, tol: float = 1e-12) -> float:
    """Survival function of the Kolmogorov distribution, P(K > lam).

    The alternating series converges fast for large ``lam``; below 1.18 the
    Jacobi-theta form of the CDF is used instead.
    """
    if lam <= 0.0:
        return 1.0
    if lam < 1.18:
        c = -(math.pi ** 2) / (8.0 * lam * lam)
        s = 0.0
        for j in range(1, terms + 1):
            term = math.exp(c * (2 * j - 1) ** 2)
            s += term
            if term < tol:
                break
        return min(1.0, max(0.0, 1.0 - math.sqrt(2.0 * math.pi) / lam * s))
    s = 0.0
    for j in range(1, terms + 1):
        term = math.exp(-2.0 * j * j * lam * lam)
        s += term if j % 2 else -term
        if term < tol:
            break
    return min(1.0, max(0.0, 2.0 * s))


def ks_two_sample(x, y) -> TestResult:
    """Two-sided two-sample Kolmogorov-Smirnov test.

    ``D`` is evaluated at every jump point of both empirical CDFs, so ties are
    exact.  The p-value is asymptotic, with effective size ``n m / (n + m)``.
    """
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise ValueError("ks_two_sample needs two non-empty samples")
    pts = np.concatenate([x, y])
    fx = np.searchsorted(x, pts, side="right") / n
    fy = np.searchsorted(y, pts, side="right") / m
    d = float(np.max(np.abs(fx - fy)))
    lam = math.sqrt(n * m / (n + m)) * d
    return TestResult(d, kolmogorov_sf(lam), n, m)


def bh_adjust(pvalues, alpha: float = 0.1):
    """Benjamini-Hochberg step-up adjusted p-values and rejection mask.

    Returns ``(adjusted, rejected)`` in the input order.
    """
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 1:
        p = p.ravel()
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy(), np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    adj = np.empty(m)
    adj[order] = np.minimum(adj_sorted, 1.0)
    return adj, adj <= alpha


@dataclass
class RandomizationReport:
    attribute: str
    table: pd.DataFrame  # one row per tested stratum
    n_skipped: int
    alpha: float

    @property
    def n_tested(self) -> int:
        return len(self.table)

    @property
    def n_significant(self) -> int:
        return int(self.table["significant"].sum())

    @property
    def share_significant(self) -> float:
        return self.n_significant / self.n_tested if self.n_tested else 0.0


def randomization_check(rows: pd.DataFrame, attribute: str, alpha: float = 0.1,
                        treatment: str = "T", strata=STRATUM, min_rows: int = 3) -> RandomizationReport:
    """Per-stratum OLS of ``attribute`` on the amount received, with BH across strata.

    Strata with fewer than ``min_rows`` rows or no treatment variation are
    skipped and counted.  The p-values are classical two-sided t tests with
    ``n - 2`` degrees of freedom; a constant attribute gives slope 0 and p = 1.
    """
    df = rows[list(strata) + [treatment, attribute]].dropna()
    keys = list(strata)
    g = df.groupby(keys, sort=True)
    n = g[treatment].transform("size").to_numpy()
    t = df[treatment].to_numpy(np.float64)
    y = df[attribute].to_numpy(np.float64)
    tc = t - g[treatment].transform("mean").to_numpy()
    yc = y - g[attribute].transform("mean").to_numpy()
    sums = pd.DataFrame({"n": n, "sxx": tc * tc, "sxy": tc * yc, "syy": yc * yc})
    for k in keys:
        sums[k] = df[k].to_numpy()
    agg = sums.groupby(keys, sort=True).agg(n=("n", "first"), sxx=("sxx", "sum"),
                                            sxy=("sxy", "sum"), syy=("syy", "sum")).reset_index()
    scale = np.maximum(agg["sxx"].to_numpy(), 0.0)
    ok = (agg["n"].to_numpy() >= min_rows) & (scale > 1e-12 * np.maximum(1.0, agg["n"].to_numpy()))
    n_skipped = int((~ok).sum())
    agg = agg[ok].reset_index(drop=True)
    sxx, sxy, syy, nn = (agg[c].to_numpy(np.float64) for c in ("sxx", "sxy", "syy", "n"))
    slope = sxy / sxx
    dof = nn - 2
    rss = np.maximum(syy - slope * sxy, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.sqrt(rss / dof / sxx)
        tstat = np.where(se > 0, slope / se, np.where(slope == 0, 0.0, np.inf))
    # exact-fit tolerance: relative to the attribute's own spread
    exact = rss <= 1e-12 * np.maximum(syy, 1e-300)
    tstat = np.where(exact & (np.abs(slope) > 0) & (syy > 0), np.inf, tstat)
    tstat = np.where(syy <= 0, 0.0, tstat)
    p = 2.0 * sps.t.sf(np.abs(tstat), np.maximum(dof, 1))
    p = np.clip(np.nan_to_num(p, nan=1.0), 0.0, 1.0)
    slope = np.where(syy <= 0, 0.0, slope)
    adj, rej = bh_adjust(p, alpha) if len(p) else (p, np.zeros(0, bool))
    table = agg[keys].copy()
    table["attribute"] = attribute
    table["n"] = nn.astype(np.int64)
    table["slope"] = slope
    table["p_raw"] = p
    table["p_adj"] = adj
    table["significant"] = rej
    return RandomizationReport(attribute, table, n_skipped, alpha)


def randomization_table(reports: list[RandomizationReport]) -> pd.DataFrame:
    """Stack reports into the ``randomization_report.csv`` layout."""
    cols = list(STRATUM) + ["attribute", "n", "slope", "p_raw", "p_adj", "significant"]
    if not reports:
        return pd.DataFrame(columns=cols)
    return pd.concat([r.table[cols] for r in reports], ignore_index=True)
