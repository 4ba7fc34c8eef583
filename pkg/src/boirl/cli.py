"""Command line entry point: ``boirl run | scan | dump-rho``."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .experiment import EnvConfig, ExperimentConfig, _grid_thetas, grid_scan, load_table, rho_dump, run_experiment


def _axes(text: str) -> tuple[int, int]:
    try:
        i, j = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated indices, got {text!r}") from None
    return i, j


def _fixed(pairs: list[str] | None, base: np.ndarray) -> np.ndarray:
    """Apply ``k=v`` overrides (comma-separated or repeated) to ``base``."""
    theta = base.copy()
    for item in ",".join(pairs or []).split(","):
        if not item:
            continue
        k, _, v = item.partition("=")
        if not _:
            raise SystemExit(f"--fix expects index=value pairs, got {item!r}")
        theta[int(k)] = float(v)
    return theta


def _env_from(path) -> tuple:
    cfg = EnvConfig.from_dict(load_table(path)) if path else EnvConfig()
    env = cfg.build()
    return env, cfg.demos(env)


def _base(env) -> np.ndarray:
    if env.ground_truth is not None:
        return env.ground_truth.copy()
    return 0.5 * (env.bounds.lower + env.bounds.upper)


def cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seeds = [args.seed]
    report = run_experiment(config, out_dir=args.out)
    print(json.dumps(report.aggregate(), indent=2))
    return 0


def cmd_scan(args) -> int:
    env, demos = _env_from(args.env)
    scan = grid_scan(env, demos, args.axes, _fixed(args.fix, _base(env)), args.res)
    scan.to_csv(args.out or sys.stdout)
    return 0


def cmd_dump_rho(args) -> int:
    env, demos = _env_from(args.env)
    lo, hi = env.bounds.lower, env.bounds.upper
    i, j = args.axes
    thetas = _grid_thetas(_fixed(args.fix, _base(env)), (i, j), np.linspace(lo[i], hi[i], args.res), np.linspace(lo[j], hi[j], args.res))
    rho_dump(env, demos, thetas, args.K, args.M, args.seed, path=args.out or sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boirl", description="Bayesian-optimization IRL on tabular MDPs")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (TOML or JSON)")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    r.set_defaults(func=cmd_run)

    for name, func, helptext in (("scan", cmd_scan, "NLL over a 2-D theta slice"), ("dump-rho", cmd_dump_rho, "rho-vectors over a 2-D theta slice")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--env", help="environment file (TOML or JSON); default gridworld")
        s.add_argument("--axes", type=_axes, default=(0, 1), help="two theta indices, e.g. 0,1")
        s.add_argument("--fix", action="append", help="index=value for coordinates off the slice (default ground truth)")
        s.add_argument("--res", "--grid", dest="res", type=int, default=30, help="points per axis")
        s.add_argument("--out", help="CSV path (default stdout)")
        if name == "dump-rho":
            s.add_argument("--K", type=int, default=10)
            s.add_argument("--M", type=int, default=5)
            s.add_argument("--seed", type=int, default=0)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
