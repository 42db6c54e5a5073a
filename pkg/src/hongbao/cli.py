"""Command line interface.

Exit codes: 0 success, 1 a check failed or a stage aborted, 2 bad usage or
configuration.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import estimator as est
from ._perf import tune_allocator
from .config import load_config
from .errors import (BootstrapInstabilityError, HongbaoError, InvalidConfigError, InvalidSpecError,
                     UnidentifiedError)
from .matcher import match_panel, matched_contrast
from .panel import build_panel, read_panel, write_panel
from .pipeline import StageError, load_inputs, run_pipeline, write_estimates
from .population import Population, generate_population
from .simulator import EventLog, simulate
from .splitter import PacketSpec, compare_variance_formulas, order_moments, sample_allocations
from .stats import RANDOMIZATION_COVARIATES, ks_two_sample, randomization_check, randomization_table

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MEAN_Z = 4.0
VAR_Z = 3.0
KS_MAX_PER_SIDE = 10_000
KS_MIN_P = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--workers", type=int, default=1, help="parallel worker cap (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hongbao", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a population")
    _common(p)
    p.add_argument("--out", required=True, help="population directory")

    p = sub.add_parser("simulate", help="simulate an event log for a population")
    _common(p)
    p.add_argument("--population", required=True)
    p.add_argument("--out", required=True, help="events.csv path")

    p = sub.add_parser("panel", help="build the recipient panel from an event log")
    _common(p)
    p.add_argument("--population", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True, help="panel.csv path")

    p = sub.add_parser("estimate", help="run every estimate on a panel")
    _common(p)
    p.add_argument("--population", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("match", help="luckiest-draw matched contrasts")
    _common(p)
    p.add_argument("--population", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--out", help="matched.csv path")

    p = sub.add_parser("randomization-check", help="per-stratum balance of covariates on the amount received")
    _common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--out", help="randomization_report.csv path")

    p = sub.add_parser("verify-splitter", help="moments and distribution of the allocation algorithm")
    p.add_argument("--amount", type=int, required=True, help="total amount in cents")
    p.add_argument("--n", type=int, required=True, help="number of recipients")
    p.add_argument("--reps", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pipeline", help="population through report in one run")
    _common(p)
    p.add_argument("--out", help="output directory (default: config output)")
    return ap


def _cfg(args):
    return load_config(args.config, args.set)


def cmd_gen(args) -> int:
    cfg = _cfg(args)
    pop = generate_population(cfg.population, cfg.seed)
    pop.to_csv(args.out)
    print(f"{pop.n_groups} groups, {len(pop.members)} users, {len(pop.edges)} ties -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _cfg(args)
    pop = Population.from_csv(args.population)
    log = simulate(pop, cfg.behavior, cfg.horizon_days, cfg.seed, workers=args.workers)
    log.to_csv(args.out)
    print(f"{log.n_packets} packets, {len(log.receipts)} receipts, {len(log.edges)} new ties -> {args.out}")
    return EXIT_OK


def cmd_panel(args) -> int:
    cfg = _cfg(args)
    pop = Population.from_csv(args.population)
    log = EventLog.from_csv(args.events)
    panel = build_panel(log, pop, cfg.window_seconds, cfg.tau_seconds)
    write_panel(panel, args.out)
    print(f"{panel['packet_id'].nunique()} spontaneous packets, {len(panel)} rows -> {args.out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _cfg(args)
    pop, panel = load_inputs(args.population, args.panel)
    a = write_estimates(panel, pop, cfg, Path(args.out), args.workers)
    print("\n".join(a.text))
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _cfg(args)
    pop, panel = load_inputs(args.population, args.panel)
    mr = match_panel(panel)
    print(f"{mr.n_keys} keys, match rate {mr.match_rate:.3f}")
    clusters = est.build_clusters(pop)
    for k in (1, 2, 3):
        for j, fam in enumerate(("overall", "extensive", "intensive")):
            out = f"kth_{fam}_{k}"
            try:
                c = matched_contrast(mr, out, clusters=clusters, reps=cfg.bootstrap_reps,
                                     seed=cfg.seed + 7000 + 10 * k + j)
            except (UnidentifiedError, BootstrapInstabilityError) as e:
                print(f"{out:<20} n/a ({e})")
                continue
            print(f"{out:<20} {c.estimate: .5f}  95% CI [{c.ci_lo: .5f}, {c.ci_hi: .5f}]  keys {c.n_keys}")
    if args.out:
        mr.to_csv(args.out, [f"kth_{f}_{k}" for k in (1, 2, 3) for f in ("overall", "extensive", "intensive")])
    return EXIT_OK


def cmd_randomization_check(args) -> int:
    cfg = _cfg(args)
    panel = read_panel(args.panel)
    reports = [randomization_check(panel, c, alpha=cfg.randomization_alpha)
               for c in RANDOMIZATION_COVARIATES if c in panel.columns]
    worst = 0.0
    for r in reports:
        worst = max(worst, r.share_significant)
        print(f"{r.attribute:<16} strata {r.n_tested:>5}  significant {r.n_significant:>4}  "
              f"share {r.share_significant:.4f}")
    if args.out:
        randomization_table(reports).to_csv(args.out, index=False)
    if worst > cfg.randomization_max_share:
        print(f"FAIL: significant share {worst:.4f} exceeds {cfg.randomization_max_share}")
        return EXIT_FAIL
    print("PASS")
    return EXIT_OK


def cmd_verify_splitter(args) -> int:
    spec = PacketSpec(args.amount, args.n)
    if args.reps < 2:
        raise InvalidSpecError("reps must be at least 2")
    failures = []
    moments = order_moments(spec, args.reps, args.seed)
    print(f"allocation of {spec.total_amount} cents among {spec.n_recipients}, {args.reps} draws")
    print(f"{'order':>5} {'mean':>12} {'expected':>12} {'z':>7} {'variance':>14} {'exact':>14} {'z':>7} "
          f"{'product rule':>14} {'KS p':>8}")
    k = min(args.reps, KS_MAX_PER_SIDE)
    x = sample_allocations(spec, k, args.seed + 2, rounded=True)
    y = sample_allocations(spec, k, args.seed + 3, rounded=False)
    for m in moments:
        o = m.order
        if abs(m.mean_z) > MEAN_Z:
            failures.append(f"mean[{o}]")
        if abs(m.var_z_exact) > VAR_Z:
            failures.append(f"variance[{o}]")
        if spec.n_recipients > 1:
            p = ks_two_sample(x[:, o - 1], y[:, o - 1]).pvalue
            if p < KS_MIN_P:
                failures.append(f"ks[{o}]")
        else:
            p = 1.0
        print(f"{o:>5} {m.mean_mc:>12.4f} {m.mean_expected:>12.4f} {m.mean_z:>7.2f} {m.var_mc:>14.2f} "
              f"{m.var_exact:>14.2f} {m.var_z_exact:>7.2f} {m.var_product_rule:>14.2f} {p:>8.4f}")
    v = compare_variance_formulas(moments, VAR_Z)
    names = {"exact": "law-of-total-variance recursion", "product_rule": "multiplicative product rule",
             "both": "both formulas", "neither": "neither formula", "undetermined": "undetermined"}
    print(f"variance formula supported by the simulation: {names[v['verdict']]}"
          + (f" (informative orders {v['orders']})" if v["orders"] else ""))
    if failures:
        print("FAIL: " + ", ".join(failures))
        return EXIT_FAIL
    print("PASS")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _cfg(args)
    res = run_pipeline(cfg, args.out, workers=args.workers)
    print(f"outputs in {res.output}")
    for line in res.summary:
        print(line)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "simulate": cmd_simulate, "panel": cmd_panel, "estimate": cmd_estimate,
            "match": cmd_match, "randomization-check": cmd_randomization_check,
            "verify-splitter": cmd_verify_splitter, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("hongbao: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    tune_allocator()
    np.seterr(all="ignore")
    try:
        return COMMANDS[args.command](args)
    except (InvalidConfigError, InvalidSpecError) as e:
        print(f"hongbao: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        print(f"hongbao: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (HongbaoError, OSError, ValueError, KeyError) as e:
        print(f"hongbao {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
