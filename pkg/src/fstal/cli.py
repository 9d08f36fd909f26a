"""Command line entry point.

Subcommands: meta-train, evaluate, cross-eval, gradcheck, gen-synthetic.
Every RunConfig field is exposed as a flag (kebab-case); values resolve
as profile defaults < config file < flags. Worker count for evaluation
comes from the FSTAL_WORKERS environment variable only.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .data import FormatError
from .harness import (ConfigError, RunConfig, cmd_cross_eval, cmd_evaluate,
                      cmd_gen_synthetic, cmd_gradcheck, cmd_meta_train,
                      resolve_config)
from .model import CheckpointError

_BOOL_FIELDS = {f.name for f in dataclasses.fields(RunConfig)
                if f.type == "bool"}
_ALIASES = {"out_dir": "--out", "data_dir": "--data"}
_CHOICES = {"k_shot": ["1", "5"], "setting": ["trimmed", "untrimmed"]}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", dest="config_path", metavar="FILE",
                        help="key = value config file")
    for f in dataclasses.fields(RunConfig):
        flags = ["--" + f.name.replace("_", "-")]
        if f.name in _ALIASES:
            flags.append(_ALIASES[f.name])
        if f.name in _BOOL_FIELDS:
            parser.add_argument(*flags, dest=f.name, action="store_true",
                                default=None)
        else:
            parser.add_argument(*flags, dest=f.name, default=None,
                                choices=_CHOICES.get(f.name), metavar="V")


def _overrides(args: argparse.Namespace) -> dict:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _resolve(args: argparse.Namespace) -> RunConfig:
    return resolve_config(profile=args.profile, config_path=args.config_path,
                          overrides=_overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fstal",
        description="Few-shot temporal action localization harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("meta-train",
                             help="episodic meta-training of the query "
                                  "adaptation block")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on the "
                                             "test classes")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True, metavar="FILE")
    p_eval.add_argument("--tasks", type=int, default=None, metavar="N")

    p_cross = sub.add_parser("cross-eval", help="evaluate a checkpoint "
                                                "across domains")
    _add_config_flags(p_cross)
    p_cross.add_argument("--checkpoint", required=True, metavar="FILE")
    p_cross.add_argument("--tasks", type=int, default=None, metavar="N")
    p_cross.add_argument("--train-profile", required=True, metavar="NAME")
    p_cross.add_argument("--test-profile", required=True, metavar="NAME")

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of "
                                              "all gradients")
    _add_config_flags(p_grad)
    p_grad.add_argument("--tolerance", type=float, default=1e-6)
    p_grad.add_argument("--step", type=float, default=1e-5)

    p_gen = sub.add_parser("gen-synthetic", help="write the synthetic world "
                                                 "as a dataset directory")
    _add_config_flags(p_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, FormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "meta-train":
        summary = cmd_meta_train(_resolve(args))
        print(f"checkpoint: {summary['checkpoint']}")
        print(f"training log: {summary['log']}")
        print(f"best epoch: {summary['best_epoch']} "
              f"(val mAP {summary['best_val_map']:.4f})")
        return 0

    if args.command == "evaluate":
        report = cmd_evaluate(_resolve(args), args.checkpoint,
                              tasks=args.tasks)
        for key, value in report.items():
            print(f"{key}: {value:.6f}" if isinstance(value, float)
                  else f"{key}: {value}")
        return 0

    if args.command == "cross-eval":
        base = _overrides(args)
        train_cfg = resolve_config(profile=args.train_profile,
                                   config_path=args.config_path,
                                   overrides=base)
        test_cfg = resolve_config(profile=args.test_profile,
                                  config_path=args.config_path,
                                  overrides=base)
        report = cmd_cross_eval(train_cfg, test_cfg, args.checkpoint,
                                tasks=args.tasks)
        for key, value in report.items():
            print(f"{key}: {value:.6f}" if isinstance(value, float)
                  else f"{key}: {value}")
        return 0

    if args.command == "gradcheck":
        report = cmd_gradcheck(_resolve(args), tolerance=args.tolerance,
                               step=args.step)
        for name in sorted(report["blocks"]):
            err = report["blocks"][name]
            status = "ok" if err < report["tolerance"] else "FAIL"
            print(f"{name}: max rel error {err:.3e} [{status}]")
        print(f"overall: {'PASS' if report['passed'] else 'FAIL'} "
              f"(worst {report['worst_block']}, "
              f"{report['max_rel_error']:.3e} vs tolerance "
              f"{report['tolerance']:.0e})")
        return 0 if report["passed"] else 1

    if args.command == "gen-synthetic":
        summary = cmd_gen_synthetic(_resolve(args))
        print(f"wrote {summary['videos']} videos across "
              f"{summary['classes']} classes to {summary['out_dir']}")
        return 0

    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
