"""Command-line harness.

Exit codes: 0 success, 1 usage or config error, 2 training aborted or a
failed check, 3 file I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_overrides
from .datasets import IdxFormatError
from .experiments import (SeedRunError, export_embeddings, load_domains, run_ablation_suite,
                          run_discriminator_comparison, run_experiment, seed_config)
from .gradcheck import run_gradcheck
from .networks import load_checkpoint
from .trainer import Model, TrainingAborted

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list must be nonempty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'key = value' settings file")
    common.add_argument("--seed", type=_seeds, metavar="N[,N...]", help="seed list")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    parser = _Parser(prog="tdda", description="Domain adaptation experiments on the desk.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train and evaluate once per seed")
    sub.add_parser("ablate", parents=[common], help="full / wo-s / wo-t / wo-st arms")
    sub.add_parser("compare-disc", parents=[common], help="task-d versus adv-d arms")
    emb = sub.add_parser("export-emb", parents=[common], help="write encoder means as CSV")
    emb.add_argument("--model", metavar="PATH", help="checkpoint to export instead of training")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of the losses")
    gc.add_argument("--configs", type=int, default=100, help="random configurations to check")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seeds"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides)


def _print_summaries(summaries) -> None:
    for s in summaries:
        print(f"{s.arm}: target accuracy {s.mean:.4f} +/- {s.std:.4f} over {len(s.seeds)} seeds")


def cmd_train(cfg: ExperimentConfig, args) -> int:
    _print_summaries([run_experiment(cfg)])
    return EXIT_OK


def cmd_ablate(cfg, args) -> int:
    _print_summaries(run_ablation_suite(cfg))
    return EXIT_OK


def cmd_compare(cfg, args) -> int:
    _print_summaries(run_discriminator_comparison(cfg))
    return EXIT_OK


def cmd_export(cfg, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.model is None:
        run_experiment(replace(cfg, export_embeddings=True))
        print(f"embeddings written to {out}")
        return EXIT_OK
    spec, params = load_checkpoint(args.model)
    model = Model(spec, params)
    for seed in cfg.seeds:
        source, target = load_domains(cfg, seed)
        if source.X.shape[1] != spec.input_dim:
            raise ConfigError(f"model expects {spec.input_dim} features, data has {source.X.shape[1]}")
        path = out / f"embeddings_seed{seed}.csv"
        export_embeddings(model, (source, target), path)
        echo = seed_config(cfg, seed).echo() + f"model = {args.model}\n"
        path.with_suffix(".config").write_text(echo, encoding="utf-8")
    print(f"embeddings written to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    if args.configs < 1:
        raise ConfigError("--configs must be positive")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    results, redrawn = run_gradcheck(args.configs, seed)
    path = out / "gradcheck.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "term", "value", "max_rel_error", "n_params", "passed"])
        for r in results:
            w.writerow([r.config, r.term, repr(r.value), repr(r.max_rel_error), r.n_params,
                        str(r.passed()).lower()])
    path.with_suffix(".config").write_text(f"seed = {seed}\nconfigs = {args.configs}\n"
                                           f"tolerance = 0.0001\nredrawn_near_kink = {redrawn}\n",
                                           encoding="utf-8")
    failed = [r for r in results if not r.passed()]
    worst = max(r.max_rel_error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed, worst relative error "
          f"{worst:.3e} ({redrawn} near-kink configurations redrawn)")
    return EXIT_ABORT if failed else EXIT_OK


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "compare-disc": cmd_compare,
            "export-emb": cmd_export, "gradcheck": cmd_gradcheck}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, SeedRunError):
        return _exit_code(exc.cause)
    if isinstance(exc, (OSError, IdxFormatError)):
        return EXIT_IO
    if isinstance(exc, TrainingAborted):
        return EXIT_ABORT
    if isinstance(exc, (UsageError, ValueError)):
        return EXIT_USAGE
    return EXIT_ABORT


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, SeedRunError, TrainingAborted, OSError, ValueError) as exc:
        print(f"tdda: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
