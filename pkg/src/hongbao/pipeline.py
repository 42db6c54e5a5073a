"""End-to-end run: population, events, panel, estimates, plot data.

Every stage writes into a scratch directory next to the target; the target is
replaced only when all stages succeed, so a failed run leaves no partial
output behind.
"""
from __future__ import annotations

import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from . import estimator as est
from .config import RunConfig, parse_duration
from .errors import HongbaoError
from .matcher import match_panel
from .panel import build_panel, read_panel, window_label, write_panel
from .population import Population, generate_population
from .report import Analyses, _effect, _fit, run_analyses, splitter_plotdata, summary_lines
from .simulator import EventLog, simulate

MARKER = "config.txt"


class StageError(HongbaoError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    output: Path
    report: pd.DataFrame
    tau_sensitivity: pd.DataFrame
    summary: list


def _csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n")


def write_estimates(panel: pd.DataFrame, pop: Population, cfg: RunConfig, out: Path,
                    workers: int = 1) -> Analyses:
    """report.csv, report.txt, randomization_report.csv, matched.csv and the panel-based plot data."""
    out.mkdir(parents=True, exist_ok=True)
    clusters = est.build_clusters(pop)
    a, rt = run_analyses(panel, clusters, cfg.window_seconds, cfg.bootstrap_reps, cfg.seed,
                         params=cfg.behavior, moderators=cfg.moderators, subsample_label=cfg.subsample_label,
                         alpha=cfg.randomization_alpha, workers=workers)
    _csv(a.frame(), out / "report.csv")
    _csv(rt, out / "randomization_report.csv")
    (out / "report.txt").write_text("\n".join(a.text))
    last = window_label(cfg.window_seconds[-1])
    outcomes = [f"{f}_{last}" for f in ("overall", "extensive", "intensive")] + \
        [f"kth_{f}_{k}" for k in (1, 2, 3) for f in ("overall", "extensive", "intensive")]
    match_panel(panel).to_csv(out / "matched.csv", outcomes)
    pdir = out / "plotdata"
    pdir.mkdir(exist_ok=True)
    for name, df in a.plotdata.items():
        _csv(df, pdir / f"{name}.csv")
    return a


def tau_sensitivity(log: EventLog, pop: Population, cfg: RunConfig, workers: int = 1) -> pd.DataFrame:
    """Day-window effects re-estimated on panels built with each spontaneity threshold."""
    clusters = est.build_clusters(pop)
    w = cfg.window_seconds[-1]
    lab = window_label(w)
    rows = []
    for i, tau in enumerate(cfg.tau_sweep):
        panel = build_panel(log, pop, windows=(w,), tau=parse_duration(tau), covariates=False)
        for j, fam in enumerate(("overall", "extensive")):
            r = _fit(est.stratified_fe_ols, panel, f"{fam}_{lab}", clusters=clusters, reps=cfg.bootstrap_reps,
                     seed=cfg.seed + 8000 + 10 * i + j, workers=workers)
            rows.append(_effect(r, tau=tau, tau_s=parse_duration(tau), outcome=f"{fam}_{lab}",
                                n_packets=int(panel["packet_id"].nunique())))
    return pd.DataFrame(rows)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as e:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, e) from e


def _prepare_target(out: Path) -> None:
    if out.exists() and not (out.is_dir() and (out / MARKER).is_file()):
        raise StageError("setup", FileExistsError(f"{out} exists and is not a previous run directory"))
    out.parent.mkdir(parents=True, exist_ok=True)


def run_pipeline(cfg: RunConfig, output=None, workers: int = 1) -> PipelineResult:
    out = Path(output or cfg.output)
    _prepare_target(out)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        (tmp / MARKER).write_text(cfg.to_text())
        pop = _stage("population", generate_population, cfg.population, cfg.seed)
        _stage("population", pop.to_csv, tmp / "population")
        log = _stage("simulate", simulate, pop, cfg.behavior, cfg.horizon_days, cfg.seed, workers=workers)
        _stage("simulate", log.to_csv, tmp / "events.csv")
        panel = _stage("panel", build_panel, log, pop, cfg.window_seconds, cfg.tau_seconds)
        _stage("panel", write_panel, panel, tmp / "panel.csv")
        # estimate from the re-read panel so that the estimate command reproduces report.csv
        panel = _stage("panel", read_panel, tmp / "panel.csv")
        a = _stage("estimate", write_estimates, panel, pop, cfg, tmp, workers)
        tau = _stage("tau-sweep", tau_sensitivity, log, pop, cfg, workers)
        pdir = tmp / "plotdata"
        _csv(tau, pdir / "tau_sensitivity.csv")
        hist, ks = _stage("splitter", splitter_plotdata, seed=cfg.seed)
        _csv(hist, pdir / "share_histograms.csv")
        _csv(ks, pdir / "share_ks.csv")
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    report = a.frame()
    lines = summary_lines(report)
    for r in tau.itertuples():
        lines.append(f"tau={r.tau:<4} {r.outcome:<15} estimate {r.estimate: .5f}  "
                     f"95% CI [{r.ci_lo: .5f}, {r.ci_hi: .5f}]  packets {r.n_packets}")
    return PipelineResult(out, report, tau, lines)


def load_inputs(population_dir, panel_csv):
    return Population.from_csv(population_dir), read_panel(panel_csv)

