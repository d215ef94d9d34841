"""Command-line entry point: ``strdistill <command> [options]``.

Every configuration field is exposed as a flag named after its dotted key
(``student.enc_depth`` -> ``--student-enc-depth``). Flags override values
from ``--config``, which override the preset.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import all_keys, build_config, load_config_file
from .errors import StrDistillError, UnknownCommand

COMMANDS = ("train", "evaluate", "predict", "cache-teacher", "make-synth", "ablate")
CONFIG_COMMANDS = ("train", "cache-teacher", "ablate")

log = logging.getLogger("strdistill")


def _flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    group = p.add_argument_group("configuration fields")
    for key, typ in all_keys().items():
        name = getattr(typ, "__name__", None) or str(typ).replace("typing.", "")
        group.add_argument(_flag(key), dest="cfg:" + key, metavar="VALUE", help=f"{key} ({name})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strdistill", description="Scene text recognition with CLIP distillation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="train a recognizer")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="benchmark a checkpoint on manifest datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True, help="dataset roots (each with gt.txt)")
    p.add_argument("--out", help="directory for prediction dumps and report.yaml")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--timing", action="store_true", help="also measure single-image latency")
    p.add_argument("--time-images", type=int, default=3000)

    p = sub.add_parser("predict", help="read the text in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("cache-teacher", help="precompute teacher features for the training corpus")
    _add_config_flags(p)

    p = sub.add_parser("make-synth", help="render a synthetic corpus")
    p.add_argument("--spec", help="YAML synth spec; built-in word list and fonts when omitted")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run an ablation table")
    p.add_argument("table", choices=("table2", "table3"))
    p.add_argument("--out", default="runs/ablations")
    p.add_argument("--seeds", type=int, nargs="+")
    _add_config_flags(p)
    return parser


def config_from_args(args: argparse.Namespace):
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return build_config(file_values, overrides)


def _run(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "train":
        from .trainer import train

        res = train(config_from_args(args))
        print(f"checkpoint: {res.checkpoint}")
        print(f"val_acc: {res.final_val_acc:.2f}")
    elif cmd == "evaluate":
        from .evaluate import benchmark

        report = benchmark(args.checkpoint, args.data, args.out, args.batch_size, args.timing, args.time_images)
        print(report.format())
    elif cmd == "predict":
        import torch

        from .checkpoint import load_student
        from .data import read_image
        from .student import student_normalize

        model, _ = load_student(args.checkpoint)
        image = torch.from_numpy(read_image(args.image)).permute(2, 0, 1)[None]
        with torch.no_grad():
            print(model.predict(student_normalize(image))[0])
    elif cmd == "cache-teacher":
        from .trainer import cache_teacher

        root, n = cache_teacher(config_from_args(args))
        print(f"{root}: {n} new records")
    elif cmd == "make-synth":
        from .data import SynthSpec, synth_generate

        spec = SynthSpec.from_file(args.spec) if args.spec else SynthSpec()
        print(synth_generate(spec, args.out))
    elif cmd == "ablate":
        from .trainer import ablation_run

        report = ablation_run(args.table, config_from_args(args), Path(args.out), args.seeds)
        print(report.format())
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    first = next((a for a in argv if not a.startswith("-")), None)
    if first is not None and first not in COMMANDS:
        parser.print_usage(sys.stderr)
        err = UnknownCommand(f"unknown command {first!r}; expected one of {', '.join(COMMANDS)}")
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return UnknownCommand.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except StrDistillError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
