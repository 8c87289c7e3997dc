"""Command-line surface: pretrain, train, eval, transfer, verify, grid.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
failure. All commands are non-interactive; output locations come from flags
only. The single environment dependence is the optional GENCLR_SEED
override (documented in the README), applied before command-line --set
overrides so explicit flags still win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as C
from . import persist, runs, verify
from .data import DataFormatError
from .losses import BatchIndexError
from .trainer import NonFiniteLoss

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p: _Parser, with_data=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one resolved config entry (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    p.add_argument("--mode", help="shortcut for --set mode=M")
    if with_data:
        p.add_argument("--data", help="dataset root (overrides data.root)")


def _resolve(args) -> dict:
    overrides: dict[str, str] = {}
    env_seed = os.environ.get("GENCLR_SEED")
    if env_seed is not None:
        overrides["seed"] = env_seed
    for item in args.set:
        if "=" not in item:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "data", None):
        overrides["data.root"] = args.data
    return C.resolve(args.config, overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="genclr",
                     description="joint generator/contrastive training at "
                                 "desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="unconditional GAN pretraining")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override train.pretrain_steps")

    p = sub.add_parser("train", help="joint contrastive training")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--generator", help="pretrained generator checkpoint")
    p.add_argument("--pretrain-inline", action="store_true",
                   help="run GAN pretraining before the joint loop")
    p.add_argument("--resume", help="resume from a training checkpoint")

    p = sub.add_parser("eval", help="linear probe on a frozen encoder")
    _add_common(p, with_data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", help="directory for the metrics log "
                                 "(default: checkpoint directory)")

    p = sub.add_parser("transfer", help="probe a frozen encoder on a "
                                        "different labeled dataset")
    _add_common(p, with_data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("verify", help="run the oracle/invariant check suite")
    _add_common(p, with_data=False)

    p = sub.add_parser("grid", help="export a grid of (G, G_ema) sample pairs")
    _add_common(p, with_data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--out", required=True)
    return parser


def _cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    if not os.path.isdir(args.out):
        try:
            os.makedirs(args.out, exist_ok=True)
        except OSError as exc:
            print(f"error: cannot create output directory: {exc}",
                  file=sys.stderr)
            return EXIT_RUNTIME
    ckpt = runs.run_pretrain(cfg, args.out, steps=args.steps)
    print(f"pretrain checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _resolve(args)
    final = runs.run_train(cfg, args.out, generator_ckpt=args.generator,
                           resume_ckpt=args.resume,
                           pretrain_inline=args.pretrain_inline)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _cmd_probe(args, transfer: bool) -> int:
    cfg = _resolve(args)
    report = runs.run_eval(cfg, args.checkpoint, args.train_data,
                           args.test_data, transfer=transfer)
    record = {"phase": "transfer" if transfer else "eval",
              **report.to_dict()}
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    log = persist.MetricsLog(os.path.join(out_dir, "metrics.jsonl"))
    log.append(record)
    log.close()
    print(json.dumps(record))
    return EXIT_OK


def _cmd_verify(args) -> int:
    results = verify.run_all()
    failed = 0
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        print(f"[{status}] {name}: {detail}")
        failed += 0 if passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def _cmd_grid(args) -> int:
    cfg = _resolve(args)
    path = runs.run_grid(cfg, args.checkpoint, args.out, args.pairs)
    print(f"grid written: {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_probe(args, transfer=False)
        if args.command == "transfer":
            return _cmd_probe(args, transfer=True)
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "grid":
            return _cmd_grid(args)
        parser.error(f"unknown command {args.command!r}")
    except C.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (persist.CheckpointError, DataFormatError, BatchIndexError,
            NonFiniteLoss, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
