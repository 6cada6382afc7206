"""Command-line entry point: ``fedslate train|evaluate|compare|etror``."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import config as config_mod
from .config import MODES, ExperimentConfig
from .errors import CheckpointError, ConfigError
from .harness import (compare_runs, compute_etror, evaluate_checkpoint, metrics_column,
                      read_metrics, run_experiment)
from .training import METRICS_HEADER


def _load_config(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.episodes is not None:
        changes["episodes"] = args.episodes
    if args.out:
        changes["output_dir"] = args.out
    if args.seed is not None:
        # one integer fans out to the three seed streams
        s = args.seed
        changes.update({"seeds.env": 3 * s, "seeds.nets": 3 * s + 1, "seeds.sampling": 3 * s + 2})
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args):
    cfg = _load_config(args)
    result = run_experiment(cfg, resume=args.resume)
    rets = metrics_column(result.records, "return_b" if cfg.federated or cfg.mode == "random"
                          else "return_a")
    tail = rets[-min(len(rets), cfg.etror.window):]
    print(f"wrote {len(result.records)} episodes to {result.output_dir / 'metrics.csv'}")
    if len(tail):
        print(f"mean return over last {len(tail)} episodes: {tail.mean():.3f}")
    if result.checkpoint:
        print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_evaluate(args):
    if not args.resume:
        raise ConfigError("evaluate: --resume <checkpoint> is required")
    records = evaluate_checkpoint(args.resume, args.episodes or 10, args.out)
    for col in ("return_a", "return_b"):
        vals = metrics_column(records, col)
        print(f"{col}: mean {vals.mean():.3f} std {vals.std():.3f} over {len(vals)} episodes")
    return 0


def cmd_compare(args):
    table = compare_runs(args.files, column=args.column, reference=args.reference,
                         epsilon_term=args.epsilon, window=args.window)
    print(table.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(table.to_csv())
        (out / "summary.txt").write_text(table.to_text())
    return 0


def cmd_etror(args):
    series = metrics_column(read_metrics(args.file), args.column)
    res = compute_etror(series, args.epsilon, args.window)
    m = "N/A" if res.m_prime is None else str(res.m_prime)
    opt = f"{res.optimal_reward:.3f}"
    print(f"ETROR {m}  optimal_reward {opt}  window {res.window}  epsilon {res.epsilon:g}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fedslate", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--resume", help="checkpoint to continue from")

    run_flags(sub.add_parser("train", help="run an experiment"))
    ev = sub.add_parser("evaluate", help="greedy rollouts from a checkpoint")
    run_flags(ev)

    def metric_flags(sp):
        sp.add_argument("--column", default="return_b", choices=METRICS_HEADER[1:])
        sp.add_argument("--window", type=int, default=20)
        sp.add_argument("--epsilon", type=float, default=5.0)

    cp = sub.add_parser("compare", help="ETROR / optimal / mean reward table")
    cp.add_argument("files", nargs="+", help="metrics CSVs, optionally path:column")
    cp.add_argument("--reference", type=int, default=0,
                    help="index of the run whose M' bounds the mean-reward horizon")
    cp.add_argument("--out")
    metric_flags(cp)
    et = sub.add_parser("etror", help="ETROR of one metrics file")
    et.add_argument("file")
    metric_flags(et)
    return p


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare,
            "etror": cmd_etror}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("always")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        problems = getattr(exc, "problems", None) or [str(exc)]
        for line in problems:
            print(f"config error: {line}", file=sys.stderr)
        return 2
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
