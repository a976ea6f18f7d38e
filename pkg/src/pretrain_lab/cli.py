"""Command-line entry point.

Subcommands mirror the pipeline stages (`gen`, `stats`, `pretrain`,
`align`, `surgery`, `finetune`, `report`) plus `run` for the whole
workflow. Every subcommand takes --config, --seed, and --out; the
PRETRAIN_LAB_THREADS environment variable caps torch worker threads.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort.
"""

import argparse
import os
import sys

import torch

from .config import ExperimentConfig, parse_config
from .corpusstats import length_stats
from .corpusgen import read_corpus
from .errors import ConfigError, DataError, PretrainLabError, exit_code_for
from .pipeline import (
    arm_paths,
    experiment_vocab,
    run_pipeline,
    stage_align,
    stage_corpus,
    stage_finetune,
    stage_pretrain,
    stage_report,
    stage_surgery,
    write_text_atomic,
)


def _apply_thread_cap(threads: int | None) -> None:
    cap = threads
    env = os.environ.get("PRETRAIN_LAB_THREADS")
    if env:
        try:
            env_cap = int(env)
        except ValueError:
            raise ConfigError(f"PRETRAIN_LAB_THREADS must be an integer, got {env!r}") from None
        cap = env_cap if cap is None else min(cap, env_cap)
    if cap is not None:
        if cap < 1:
            raise ConfigError(f"thread cap must be >= 1, got {cap}")
        torch.set_num_threads(cap)


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    config = parse_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    os.makedirs(config.out_dir, exist_ok=True)
    return config


def _per_arm(config, fn) -> None:
    vocab = experiment_vocab(config)
    for arm in config.arms:
        fn(config, arm, vocab)


def cmd_gen(args) -> int:
    config = _load_config(args)
    _per_arm(config, stage_corpus)
    return 0


def cmd_stats(args) -> int:
    config = _load_config(args)
    vocab = experiment_vocab(config)
    for arm in config.arms:
        if arm.corpus.kind == "none":
            continue
        paths = arm_paths(config, arm)
        if not os.path.exists(paths.corpus):
            raise DataError(
                f"arm {arm.name!r}: corpus artifact missing; run the gen stage first")
        corpus = read_corpus(paths.corpus, vocab)
        report = length_stats(corpus)
        write_text_atomic(paths.stats_txt, report.to_text())
        write_text_atomic(paths.stats_csv,
                          report.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
        print(f"[{arm.name}]")
        print(report.to_text(), end="")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    _per_arm(config, stage_pretrain)
    return 0


def cmd_align(args) -> int:
    config = _load_config(args)
    _per_arm(config, stage_align)
    return 0


def cmd_surgery(args) -> int:
    config = _load_config(args)
    _per_arm(config, stage_surgery)
    return 0


def cmd_finetune(args) -> int:
    config = _load_config(args)
    _per_arm(config, stage_finetune)
    return 0


def cmd_report(args) -> int:
    config = _load_config(args)
    stage_report(config)
    report_txt = os.path.join(config.out_dir, "report.txt")
    if os.path.exists(report_txt):
        with open(report_txt, encoding="utf-8") as fh:
            print(fh.read(), end="")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    status = run_pipeline(config, parallel_arms=args.parallel_arms)
    report_txt = os.path.join(config.out_dir, "report.txt")
    if os.path.exists(report_txt):
        with open(report_txt, encoding="utf-8") as fh:
            print(fh.read(), end="")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pretrain-lab",
        description="Pre-training data ablation toolkit: synthesize corpora, "
                    "pre-train, align, operate on embeddings, fine-tune, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen": (cmd_gen, "generate or ingest every arm's corpus"),
        "stats": (cmd_stats, "corpus statistics reports"),
        "pretrain": (cmd_pretrain, "masked-LM pre-training per arm"),
        "align": (cmd_align, "embedding/LM-head alignment runs"),
        "surgery": (cmd_surgery, "unused-embedding substitution"),
        "finetune": (cmd_finetune, "fine-tune every task per arm"),
        "report": (cmd_report, "aggregate metrics into the report table"),
        "run": (cmd_run, "full pipeline"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--threads", type=int, default=None, help="cap torch threads")
        if name == "run":
            p.add_argument("--parallel-arms", type=int, default=1,
                           help="run up to N independent arms concurrently")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap(args.threads)
        return args.fn(args)
    except PretrainLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
