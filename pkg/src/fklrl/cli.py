"""Command line entry point: ``fklrl train|sweep|eval|oracle``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from .agent import VARIANTS
from .envs import make_env
from .harness import NumericalAbort, RunConfig, evaluate, load_config, parse_eta, sweep, train
from .tabular_oracle import policy_evaluation_exact, risk_seeking_evaluation, value_iteration

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
DEFAULT_TAU_GRID = "0.25,0.5,1,2,4"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_seeds(text: str) -> list[int]:
    """``0..9`` (inclusive) or a comma list such as ``0,3,7``."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise UsageError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def parse_floats(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--env")
    p.add_argument("--mode", choices=VARIANTS)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau-h", dest="tau_h", type=float)
    p.add_argument("--gae-discount", dest="gae_discount", choices=("paper", "standard"))
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--record-wall-time", dest="record_wall_time", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fklrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration")
    _add_run_options(p)
    p.add_argument("--eta", help="optimism in (0, 1) or 'zero'")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sweep", help="train an eta x seed grid")
    _add_run_options(p)
    p.add_argument("--etas", default="zero,0.1,0.5,0.9")
    p.add_argument("--seeds", default="0..9")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("eval", help="roll out a checkpoint's policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("oracle", help="exact tabular values as CSV")
    p.add_argument("--env", required=True, choices=("grid", "bandit"))
    p.add_argument("--tau-grid", dest="tau_grid", default=DEFAULT_TAU_GRID)
    p.add_argument("--gamma", type=float)
    return parser


def run_config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in
                 ("env", "mode", "episodes", "out", "lam", "tau_h", "gae_discount", "width", "depth",
                  "gamma", "lr", "record_wall_time", "eta", "seed")}
    if args.config:
        return load_config(args.config, **overrides)
    return RunConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def oracle_rows(env_id: str, taus: list[float], gamma: float | None = None) -> list[dict]:
    env = make_env(env_id)
    mdp = env.enumerate_mdp() if gamma is None else env.enumerate_mdp(gamma)
    uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    v_exact = policy_evaluation_exact(mdp, uniform)
    v_fkl = {tau: risk_seeking_evaluation(mdp, uniform, tau) for tau in taus}
    v_star, _ = value_iteration(mdp)
    rows = []
    for s in range(mdp.n_states):
        row = {"state": s, "terminal": int(mdp.terminal[s]), "v_exact": float(v_exact[s])}
        row.update({f"v_fkl_tau_{tau:g}": float(v[s]) for tau, v in v_fkl.items()})
        row["v_star"] = float(v_star[s])
        rows.append(row)
    return rows


def _write_rows(rows: list[dict], stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=list(rows[0]))
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train":
            out = train(run_config_from_args(args))
            print(out / "metrics.csv")
        elif args.command == "sweep":
            etas = [parse_eta(e) for e in args.etas.split(",")]
            seeds = parse_seeds(args.seeds)
            base = run_config_from_args(args)
            print(sweep(base, etas, seeds, args.workers))
        elif args.command == "eval":
            rows = evaluate(args.checkpoint, args.env, args.episodes, args.seed, args.out)
            if args.out is None:
                _write_rows(rows, sys.stdout)
        elif args.command == "oracle":
            taus = parse_floats(args.tau_grid)
            if not taus or any(t <= 0 for t in taus):
                raise UsageError("tau grid entries must be positive")
            _write_rows(oracle_rows(args.env, taus, args.gamma), sys.stdout)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
