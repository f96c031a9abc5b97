"""Command line entry point

Subcommands: ``fig3``, ``tree-sweep``, ``collect``, ``train``, ``search``, ``eval`` and
``plot-data``. Flags are applied over the defaults, then ``--config`` is applied over the
flags.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 failed ``eval --assert``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from cqlearn.errors import ConfigError, NumericalError
from cqlearn.harness import experiments
from cqlearn.harness.config import ExperimentConfig, apply_overrides, load_config, save_config
from cqlearn.harness.plotdata import emit_plot_data

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_ASSERT = 3

# flag dest -> dotted config key
FLAG_KEYS = {
    "output_dir": "output_dir",
    "seed": "seed",
    "workers": "workers",
    "branches": "tabular.branches",
    "tabular_seeds": "tabular.seeds",
    "max_episodes": "tabular.max_episodes",
    "epsilon": "tabular.epsilon",
    "alpha": "tabular.alpha",
    "patience": "tabular.patience",
    "method": "deep.method",
    "n_transitions": "deep.n_transitions",
    "steps": "deep.steps",
    "batch_size": "deep.batch_size",
    "lr": "deep.lr",
    "seeds": "deep.seeds",
    "comfort": "constraints.comfort",
    "episodes": "eval.n_episodes",
    "spe": "eval.spe",
    "search_method": "search.method",
    "n_samples": "search.n_samples",
}


def _common(parser):
    parser.add_argument("--config", help="YAML experiment config; overrides the flags")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _deep(parser):
    parser.add_argument("--method", choices=["dqn", "cdqn", "cdqn_msc", "reward_shaping", "loss_penalty"])
    parser.add_argument("--n-transitions", dest="n_transitions", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--seeds", type=int, nargs="+")
    parser.add_argument("--comfort", choices=["lcmax", "vgmin", "none"])
    parser.add_argument("--episodes", type=int, help="evaluation episodes")
    parser.add_argument("--spe", choices=["safety", "full", "none"], help="extraction for the baselines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cqlearn", description="Constrained Q-learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fig3", help="compare Q-learning, SPE, Constrained Q-learning and CPI")
    _common(p)
    p.add_argument("--no-constraints", action="store_true")

    p = sub.add_parser("tree-sweep", help="samples to convergence on the Tree MDPs")
    _common(p)
    p.add_argument("--branches", type=int, nargs="+")
    p.add_argument("--seeds", dest="tabular_seeds", type=int, help="seeds per (B, algorithm)")
    p.add_argument("--max-episodes", dest="max_episodes", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--patience", type=int)

    p = sub.add_parser("collect", help="collect the fixed batch of one seed")
    _common(p)
    _deep(p)
    p.add_argument("--chains", action="store_true", help="also export lane-change transition chains")

    p = sub.add_parser("train", help="train and evaluate a highway agent per seed")
    _common(p)
    _deep(p)

    p = sub.add_parser("search", help="random search over the penalty weights of a baseline")
    _common(p)
    _deep(p)
    p.add_argument("--search-method", dest="search_method", choices=["reward_shaping", "loss_penalty"])
    p.add_argument("--n-samples", dest="n_samples", type=int)

    p = sub.add_parser("eval", help="evaluate a saved network")
    _common(p)
    _deep(p)
    p.add_argument("checkpoint")
    p.add_argument("--assert", dest="check", action="store_true", help="exit 3 unless every constraint holds")

    p = sub.add_parser("plot-data", help="tidy plot data from sweep and search CSVs")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def config_from_args(args) -> ExperimentConfig:
    """defaults, then the given flags, then the config file"""
    overrides = {"experiment": args.command}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    config = apply_overrides(ExperimentConfig(), overrides)
    config = load_config(getattr(args, "config", None), base=config)
    return dataclasses.replace(config, experiment=args.command)


def run(args) -> int:
    if args.command == "plot-data":
        emit_plot_data(args.inputs, args.out)
        return EXIT_OK
    config = config_from_args(args)
    save_config(config, experiments.output_path(config, f"config_{args.command}.yaml"))
    if args.command == "fig3":
        report = experiments.run_fig3_demo(config, with_constraints=not args.no_constraints)
        print(report[["method", "return", "terminal_state"]].to_string(index=False))
    elif args.command == "tree-sweep":
        _, summary = experiments.run_tree_sweep(config)
        print(summary.to_string(index=False))
    elif args.command == "collect":
        for seed in config.deep.seeds:
            experiments.run_collect(config, int(seed), chains=args.chains)
    elif args.command == "train":
        metrics = experiments.run_highway_training(config)
        print(metrics.to_string(index=False))
    elif args.command == "search":
        _, summary = experiments.run_random_search(config)
        print(summary.to_string(index=False))
    elif args.command == "eval":
        metrics, _ = experiments.run_evaluation(config, args.checkpoint)
        print(metrics.to_dict())
        if args.check:
            failures = experiments.acceptance_failures(metrics, config.constraints)
            for failure in failures:
                logger.error("check failed: %s", failure)
            if failures:
                return EXIT_ASSERT
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
