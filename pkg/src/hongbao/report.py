"""Analyses run by the pipeline and their CSV / text renderings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import estimator as est
from .matcher import match_panel, matched_contrast
from .panel import window_label
from .simulator import BehaviorParams
from .splitter import PacketSpec, sample_allocations
from .stats import RANDOMIZATION_COVARIATES, ks_two_sample, randomization_check, randomization_table

REPORT_COLUMNS = ["name", "estimate", "se", "ci_lo", "ci_hi", "n_obs", "n_strata", "adj_r2",
                  "analysis", "outcome", "term", "p_value", "reps", "truth"]
FAMILIES = ("overall", "extensive", "intensive")
_SOFT = (est.UnidentifiedError, est.BootstrapInstabilityError, est.InvalidSpecError)


@dataclass
class Analyses:
    rows: list = field(default_factory=list)       # report.csv rows
    plotdata: dict = field(default_factory=dict)   # name -> DataFrame
    text: list = field(default_factory=list)       # rendered sections

    def add(self, analysis: str, outcome: str, rep: est.EstimateReport | None, truth: dict | None = None,
            terms=("T",)):
        truth = truth or {}
        if rep is None:
            for name in terms:
                self.add_row(name=f"{analysis}:{outcome}:{name}", analysis=analysis, outcome=outcome, term=name,
                             n_obs=0, truth=truth.get(name, np.nan))
            return
        for k, name in enumerate(rep.names):
            self.rows.append({
                "name": f"{analysis}:{outcome}:{name}", "estimate": float(rep.coef[k]), "se": float(rep.se[k]),
                "ci_lo": float(rep.ci_lo[k]), "ci_hi": float(rep.ci_hi[k]), "n_obs": rep.n_obs,
                "n_strata": rep.n_strata, "adj_r2": rep.adj_r2, "analysis": analysis, "outcome": outcome,
                "term": name, "p_value": float(rep.pvalue[k]), "reps": rep.reps, "truth": truth.get(name, np.nan)})

    def add_row(self, **kw):
        row = {c: np.nan for c in REPORT_COLUMNS}
        row.update(kw)
        self.rows.append(row)

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=REPORT_COLUMNS)
        for c in ("n_obs", "n_strata", "reps"):
            df[c] = df[c].astype("Int64")
        return df


def _fmt(x, nd=4) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return f"{x:.{nd}f}"


def _stars(p) -> str:
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


def _coef_cell(rep, k=0, nd=4) -> str:
    if rep is None:
        return "n/a"
    return f"{rep.coef[k]:.{nd}f}{_stars(rep.pvalue[k])} ({rep.se[k]:.{nd}f})"


def _table(title: str, header: list, body: list, note: str = "") -> str:
    cols = [header] + body
    width = [max(len(str(r[i])) for r in cols) for i in range(len(header))]
    line = "  ".join("-" * w for w in width)
    out = [title, line, "  ".join(str(h).rjust(w) if i else str(h).ljust(w) for i, (h, w) in enumerate(zip(header, width))),
           line]
    for r in body:
        out.append("  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, width))))
    out.append(line)
    if note:
        out.append(note)
    return "\n".join(out) + "\n"


def _truth_ext(params: BehaviorParams | None) -> dict:
    if params is None or params.festival_multiplier != 1 or params.theta_ext_clustering != 0:
        return {}
    return {"T": params.theta_ext}


def _fit(fn, *args, **kw):
    """Run one estimator; None when the sample cannot identify it."""
    try:
        return fn(*args, **kw)
    except _SOFT:
        return None


def _effect(r, **keys) -> dict:
    if r is None:
        return {**keys, "estimate": np.nan, "se": np.nan, "ci_lo": np.nan, "ci_hi": np.nan, "n_obs": 0}
    return {**keys, "estimate": r.beta, "se": float(r.se[0]), "ci_lo": r.ci[0], "ci_hi": r.ci[1], "n_obs": r.n_obs}


def run_analyses(panel: pd.DataFrame, clusters: pd.Series, windows, reps: int, seed: int,
                 params: BehaviorParams | None = None, moderators=(), subsample_label: str = "festival",
                 alpha: float = 0.1, workers: int = 1) -> tuple[Analyses, pd.DataFrame]:
    """All estimates on one panel.  Returns the analyses and the randomization table.

    Estimates the sample cannot identify are reported as empty rows.
    """
    a = Analyses()
    labels = [window_label(w) for w in windows]
    kw = dict(clusters=clusters, reps=reps, workers=workers)
    truth24 = _truth_ext(params)
    last = labels[-1]

    # main effects by window
    body, me_rows = [], []
    main = {}
    for i, lab in enumerate(labels):
        cells = [lab]
        for j, fam in enumerate(FAMILIES):
            out = f"{fam}_{lab}"
            r = main[out] = _fit(est.stratified_fe_ols, panel, out, seed=seed + 100 * i + j, **kw)
            a.add("stratified", out, r, truth24 if out == "extensive_24h" else None)
            cells.append(_coef_cell(r))
            me_rows.append(_effect(r, spec="stratified", window=lab, outcome=fam))
        body.append(cells)
    for what in ("n_obs", "n_strata"):
        body.append([what] + [str(getattr(main[f"{f}_{last}"], what, 0)) for f in FAMILIES])
    a.text.append(_table("Marginal effect of the amount received (per CNY), stratum fixed effects",
                         ["window", *FAMILIES], body, "Standard errors in parentheses; *** p<0.01, ** p<0.05, * p<0.1."))

    # confounded benchmarks
    body = []
    for i, lab in enumerate(labels):
        cells = [lab]
        for j, fam in enumerate(("overall", "extensive")):
            out = f"{fam}_{lab}"
            r = _fit(est.linear_spec_ols, panel, out, seed=seed + 1000 + 10 * i + j, **kw)
            a.add("linear", out, r)
            me_rows.append(_effect(r, spec="linear", window=lab, outcome=fam))
            cells += [_coef_cell(main[out]), _coef_cell(r)]
        body.append(cells)
    nv = _fit(est.naive_ols, panel, f"extensive_{last}", seed=seed + 1500, **kw)
    a.add("naive", f"extensive_{last}", nv)
    gap_note = ""
    if reps >= 2:
        g = _fit(est.specification_difference_test, panel, f"extensive_{last}", clusters=clusters, reps=reps,
                 seed=seed + 1600)
        if g is not None:
            a.add_row(name=f"spec_gap:extensive_{last}:linear-stratified", estimate=g.difference, se=g.se,
                      ci_lo=g.ci_lo, ci_hi=g.ci_hi, n_obs=g.first.n_obs, analysis="spec_gap",
                      outcome=f"extensive_{last}", term="linear-stratified", p_value=g.pvalue, reps=reps)
            gap_note = f"\nLinear minus stratified, extensive {last}: {g.difference:.4f} [{g.ci_lo:.4f}, {g.ci_hi:.4f}]"
    a.text.append(_table("Stratified versus linear specification",
                         ["window", "overall strat.", "overall linear", "ext. strat.", "ext. linear"], body,
                         f"Pooled OLS without strata, extensive {last}: {_coef_cell(nv)}" + gap_note))
    a.plotdata["marginal_effects"] = pd.DataFrame(me_rows)

    # direct versus indirect, other groups
    rows, body = [], []
    for i, lab in enumerate(labels):
        cells = [lab]
        for j, fam in enumerate(("direct", "indirect", "other_groups")):
            out = f"{fam}_{lab}"
            r = _fit(est.stratified_fe_ols, panel, out, seed=seed + 2000 + 10 * i + j, **kw)
            a.add("stratified", out, r)
            rows.append(_effect(r, window=lab, outcome=fam))
            cells.append(_coef_cell(r))
        body.append(cells)
    a.text.append(_table("Direct, indirect and other-group responses (per CNY)",
                         ["window", "direct", "indirect", "other groups"], body))
    a.plotdata["direct_indirect"] = pd.DataFrame(rows)

    # network dynamics
    rows, body = [], []
    for d, col in enumerate(("edges_1d", "edges_3d", "edges_7d")):
        r = _fit(est.stratified_fe_ols, panel, col, seed=seed + 3000 + d, **kw)
        # without tie formation the baseline tie process ignores the amount received
        a.add("stratified", col, r, {"T": 0.0} if params is not None and params.tie_formation_rate == 0 else None)
        rows.append(_effect(r, outcome=col))
        body.append([col, _coef_cell(r, nd=5), str(getattr(r, "n_obs", 0))])
    a.text.append(_table("New within-group ties after receiving (per CNY)", ["outcome", "effect", "N"], body))
    a.plotdata["edge_formation"] = pd.DataFrame(rows)

    # network moderators
    body = []
    for i, m in enumerate(moderators):
        r = _fit(est.interaction_regression, panel, f"extensive_{last}", [m], include_group_size_fe=True,
                 seed=seed + 4000 + i, **kw)
        truth = {}
        if params is not None and params.festival_multiplier == 1 and m == "clustering":
            truth = {"T": params.theta_ext, f"T:{m}": params.theta_ext_clustering}
        a.add(f"interaction:{m}", f"extensive_{last}", r, truth)
        if r is None:
            body.append([m, "n/a", "n/a", "n/a", "0"])
        else:
            body.append([m, _coef_cell(r, 0, 5), _coef_cell(r, r.index(m), 5),
                         _coef_cell(r, r.index(f"T:{m}"), 5), str(r.n_obs)])
    if body:
        a.text.append(_table(f"Moderation by network position, extensive margin {last}, group-size fixed effects",
                             ["moderator", "T", "moderator", "T x moderator", "N"], body))

    # inequity among luckiest recipients
    r = _fit(est.inequity_regression, est.luckiest_rows(panel), f"extensive_{last}", seed=seed + 5000, **kw)
    truth = {}
    if params is not None and params.festival_multiplier == 1 and params.theta_ext_clustering == 0:
        truth = {"T": params.theta_ext, "Z": 0.0 - params.delta_luck * params.luck_inequity}
    a.add("inequity", f"extensive_{last}", r, truth, terms=("T", "Z"))
    a.text.append(_table("Luckiest recipients: amount and ratio of second-largest to largest share",
                         ["term", "estimate", "N"],
                         [[n, _coef_cell(r, k), str(getattr(r, "n_obs", 0))] for k, n in enumerate(("T", "Z"))]))

    # subsample contrast
    if subsample_label and subsample_label in panel.columns and panel[subsample_label].nunique() == 2 and reps:
        sc = _fit(est.subsample_difference_test, panel, subsample_label, f"extensive_{last}", clusters=clusters,
                  reps=reps, seed=seed + 6000)
        if sc is not None:
            for v, rep in zip(sc.labels, (sc.first, sc.second)):
                t = {}
                if params is not None and subsample_label == "festival" and params.theta_ext_clustering == 0:
                    t = {"T": params.theta_ext * (params.festival_multiplier if v == 1 else 1.0)}
                a.add(f"subsample:{subsample_label}={v}", f"extensive_{last}", rep, t)
            a.add_row(name=f"subsample:{subsample_label}:extensive_{last}:difference", estimate=sc.difference,
                      se=sc.se, ci_lo=sc.ci_lo, ci_hi=sc.ci_hi, analysis=f"subsample:{subsample_label}",
                      outcome=f"extensive_{last}", term="difference", p_value=sc.pvalue, reps=reps)
            a.text.append(_table(f"Subsamples by {subsample_label}, extensive margin {last}",
                                 ["subsample", "effect", "N"],
                                 [[f"{subsample_label}={sc.labels[0]}", _coef_cell(sc.first), str(sc.first.n_obs)],
                                  [f"{subsample_label}={sc.labels[1]}", _coef_cell(sc.second),
                                   str(sc.second.n_obs)],
                                  ["difference", f"{sc.difference:.4f} (p={sc.pvalue:.3f})", ""]]))

    # luckiest-draw matching
    mr = match_panel(panel)
    rows, body = [], []
    if mr.n_keys:
        for k in (1, 2, 3):
            for j, fam in enumerate(FAMILIES):
                out = f"kth_{fam}_{k}"
                try:
                    c = matched_contrast(mr, out, clusters=clusters, reps=reps, seed=seed + 7000 + 10 * k + j)
                except (est.UnidentifiedError, est.BootstrapInstabilityError):
                    continue
                rows.append({"k": k, "outcome": fam, "estimate": c.estimate, "ci_lo": c.ci_lo, "ci_hi": c.ci_hi,
                             "se": c.se, "n_keys": c.n_keys})
                a.add_row(name=f"matched:{out}:luckiest", estimate=c.estimate, se=c.se, ci_lo=c.ci_lo,
                          ci_hi=c.ci_hi, n_obs=c.n_treated + c.n_control, analysis="matched", outcome=out,
                          term="luckiest", p_value=c.pvalue, reps=reps)
                body.append([out, f"{c.estimate:.4f}{_stars(c.pvalue)} [{_fmt(c.ci_lo)}, {_fmt(c.ci_hi)}]",
                             str(c.n_keys)])
    a.text.append(_table(f"Luckiest draw, exact matching on (A, N, O, T); match rate {mr.match_rate:.3f}",
                         ["outcome", "luckiest - control [95% CI]", "keys"], body))
    a.plotdata["matched_contrasts"] = pd.DataFrame(rows, columns=["k", "outcome", "estimate", "ci_lo", "ci_hi", "se",
                                                             "n_keys"])

    # first subsequent sender by amount rank
    rk = panel.assign(rank=panel.groupby("packet_id")["T"].rank(ascending=False, method="first").astype(np.int64))
    g = rk.groupby(["n_received", "rank"])["kth_extensive_1"]
    fs = g.agg(["size", "mean", "std"]).reset_index()
    fs["se"] = fs["std"] / np.sqrt(fs["size"])
    a.plotdata["first_sender_by_rank"] = fs.rename(columns={"size": "n_rows", "mean": "prob_first_sender"}) \
        .drop(columns="std")

    # randomization
    reports = [randomization_check(panel, c, alpha=alpha) for c in RANDOMIZATION_COVARIATES if c in panel.columns]
    rt = randomization_table(reports)
    body = [[r.attribute, str(r.n_tested), str(r.n_significant), str(r.n_skipped),
             f"{(r.table['p_raw'] < 0.05).mean() if r.n_tested else 0:.3f}"] for r in reports]
    a.text.append(_table(f"Randomization check, BH alpha={alpha}",
                         ["covariate", "strata", "significant", "skipped", "raw p<0.05"], body))
    return a, rt


def splitter_plotdata(specs=((1000, 5), (500, 3)), reps: int = 10_000, seed: int = 0, bins: int = 20):
    """Histograms and KS tests of the cent-rounded sampler against the continuous algorithm."""
    hist, ks = [], []
    for a, n in specs:
        spec = PacketSpec(a, n)
        x = sample_allocations(spec, reps, seed, rounded=True)
        y = sample_allocations(spec, reps, seed + 1, rounded=False)
        for o in range(n):
            hi = float(max(x[:, o].max(), y[:, o].max()))
            edges = np.linspace(0.0, hi, bins + 1)
            cx, _ = np.histogram(x[:, o], edges)
            cy, _ = np.histogram(y[:, o], edges)
            for b in range(bins):
                hist.append({"A": a, "N": n, "O": o + 1, "bin_lo": edges[b], "bin_hi": edges[b + 1],
                             "rounded": int(cx[b]), "continuous": int(cy[b])})
            t = ks_two_sample(x[:, o], y[:, o])
            ks.append({"A": a, "N": n, "O": o + 1, "D": t.statistic, "p_value": t.pvalue})
    return pd.DataFrame(hist), pd.DataFrame(ks)


def summary_lines(report: pd.DataFrame) -> list[str]:
    """Estimates with an injected truth, one line each."""
    out = []
    for r in report[report["truth"].notna()].itertuples():
        ok = r.ci_lo <= r.truth <= r.ci_hi
        out.append(f"{r.name:<55} estimate {r.estimate: .5f}  95% CI [{r.ci_lo: .5f}, {r.ci_hi: .5f}]  "
                   f"truth {r.truth: .5f}  {'covered' if ok else 'NOT covered'}")
    return out
