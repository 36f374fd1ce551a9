"""Command-line entry point.

Verbs: generate, embed, partition, train, analyze, report, all.
Exit codes: 0 success, 1 config error, 2 partial failure (see the manifest).
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import ExperimentConfig, default_config, load_config
from .errors import ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedhet",
        description="Deterministic federated-learning heterogeneity lab",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, helptext in [
        ("generate", "write the synthetic dataset and ground-truth group file"),
        ("embed", "train the task model, extract embeddings, fit K-means"),
        ("partition", "build class- and embedding-based client partitions"),
        ("train", "run federated training for every configured cell"),
        ("analyze", "emit plot data, heatmap, cross-seed and metric tables"),
        ("report", "write the run manifest"),
        ("all", "run the whole pipeline"),
    ]:
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("--config", help="experiment config file (key = value lines)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--jobs", type=int, default=1, help="parallel training cells")
        p.add_argument(
            "--reproducible", action="store_true",
            help="omit timestamps so identical runs are byte-identical",
        )
    return parser


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    if args.out is not None:
        config.raw["out"] = args.out
        config.out = type(config.out)(args.out)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        config.raw["seed"] = str(args.seed)
        config.seed = args.seed
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.verb == "generate":
            pipeline.cmd_generate(config)
        elif args.verb == "embed":
            pipeline.cmd_embed(config)
        elif args.verb == "partition":
            pipeline.cmd_partition(config)
        elif args.verb == "train":
            statuses = pipeline.cmd_train(config, jobs=args.jobs)
            pipeline.cmd_report(config, statuses, reproducible=args.reproducible)
            if any(s[4] != "ok" for s in statuses):
                return 2
        elif args.verb == "analyze":
            pipeline.cmd_analyze(config)
        elif args.verb == "report":
            pipeline.cmd_report(config, reproducible=args.reproducible)
        elif args.verb == "all":
            return pipeline.run_all(
                config, jobs=args.jobs, reproducible=args.reproducible
            )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
