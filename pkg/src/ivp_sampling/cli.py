"""Command line: ``ivp-sampling {lqr,quadrotor,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import experiments as ex
from .errors import IvpSamplingError

log = logging.getLogger("ivp_sampling")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivp-sampling", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML experiment config")
        sp.add_argument("--seed", type=int, help="base seed (overrides the config)")
        sp.add_argument("--threads", type=int, help="work-pool size (0 = logical cores)")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    lq = sub.add_parser("lqr", help="scalar LQR checks: gap law, moment gaps, Model-2 sweep")
    common(lq)
    lq.add_argument("--check", action="store_true",
                    help="exit nonzero when a statistical check fails")

    qd = sub.add_parser("quadrotor", help="quadrotor landing: sample, train, evaluate")
    common(qd)
    qd.add_argument("--grid", help="temporal grid knots, comma separated")
    qd.add_argument("--strategy", choices=config_mod.STRATEGIES)
    qd.add_argument("--check", action="store_true",
                    help="exit nonzero when the budget ledger does not balance")

    rp = sub.add_parser("report", help="merge finished runs into one comparison table")
    rp.add_argument("run_dirs", nargs="+", type=Path)
    rp.add_argument("--out", type=Path, help="write summary.csv and report.txt here")
    return p


def _load(args, benchmark: str) -> dict:
    overrides = {"seed": args.seed, "threads": args.threads,
                 "out": str(args.out) if args.out else None}
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if getattr(args, "grid", None):
        overrides["sampler.grid"] = config_mod.parse_grid(args.grid)
    cfg = config_mod.load(args.config, overrides)
    cfg["benchmark"] = benchmark
    return cfg


def cmd_lqr(args) -> int:
    cfg = _load(args, "lqr")
    out = Path(cfg["out"])
    res = ex.lqr_suite(cfg)
    ex.write_lqr(res, out)
    (out / "config.echo").write_text(config_mod.echo(cfg))
    man = ["[run]", "benchmark = lqr", f"seed = {cfg['seed']}", "", "[files]",
           "theorem1 = theorem1.csv", "model2_gap_vs_T = model2_gap_vs_T.csv", "paths = paths.csv",
           "", "[checks]"]
    man += [f"{c.name} = {'pass' if c.passed else 'FAIL'} ({c.detail})" for c in res.checks]
    (out / "manifest.txt").write_text("\n".join(man) + "\n")
    failed = [c for c in res.checks if not c.passed]
    for c in res.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    if args.check and failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_quadrotor(args) -> int:
    cfg = _load(args, "quadrotor")
    out = Path(cfg["out"])
    pool = ex.make_pool(int(cfg["threads"]))
    try:
        res = ex.quadrotor_experiment(cfg, pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    ex.write_quadrotor(res, cfg, out, cfg["strategy"])
    (out / "config.echo").write_text(config_mod.echo(cfg))
    for i, t in enumerate(res.tables):
        s = t.summary()
        print(f"iteration {i}: mean ratio {s['mean']:.4g}, median {s['median']:.4g}, "
              f"diverged {s['diverged']}")
    print(f"open-loop solves: {res.run.budget} (expected {res.expected_budget})")
    if args.check and res.run.budget != res.expected_budget:
        print("budget ledger does not balance", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    text, plain = ex.merge_reports(args.run_dirs)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "summary.csv").write_text(text)
        (args.out / "report.txt").write_text(plain)
    print(plain, end="")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return {"lqr": cmd_lqr, "quadrotor": cmd_quadrotor, "report": cmd_report}[args.command](args)
    except IvpSamplingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
