"""Command-line interface.

Exit codes: 0 success, 1 usage/configuration, 2 data/format,
3 numerical failure, 4 selftest failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import load_dataset
from .errors import (
    ConfigError,
    DatasetError,
    FormatError,
    GeneratorError,
    NumericalError,
    UsageError,
)
from .roi import CamRoiProvider, SegRoiProvider, precompute_rois
from .selftest import run_selftest
from .train import (
    TrainConfig,
    evaluate,
    export_saliency,
    parse_config_file,
    toy_config,
    train,
    train_aux_classifier,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="roivit", description="ROI-aware dual-branch vision transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a PPM dataset tree")
    p_train.add_argument("--data", required=True, help="dataset root (root/<class>/*.ppm)")
    p_train.add_argument("--config", help="key = value config file (defaults to the toy profile)")
    p_train.add_argument("--out", required=True, help="output directory for checkpoints and logs")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--roi", choices=("cam", "seg"), help="override the checkpoint's ROI mode")
    p_eval.add_argument("--out", help="prefix for <out>.txt and <out>.kv report files")

    p_roigen = sub.add_parser("roigen", help="precompute ROI maps into a cache directory")
    p_roigen.add_argument("--data", required=True)
    p_roigen.add_argument("--mode", choices=("cam", "seg"), required=True)
    p_roigen.add_argument("--out", required=True, help="cache directory")
    p_roigen.add_argument("--config", help="config file (governs image size and aux training)")

    p_sal = sub.add_parser("saliency", help="export a blended saliency heatmap for one image")
    p_sal.add_argument("--image", required=True)
    p_sal.add_argument("--ckpt", required=True)
    p_sal.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run the built-in verification suite")
    return parser


def _load_config(path: str | None, num_classes: int) -> TrainConfig:
    if path is None:
        return toy_config(num_classes=num_classes)
    return parse_config_file(path, num_classes=num_classes)


def _cmd_train(args) -> int:
    data = load_dataset(args.data)
    config = _load_config(args.config, data.num_classes)
    result = train(config, data, out_dir=args.out, log=print)
    last = result.epoch_stats[-1]
    print(f"done: {len(result.step_losses)} steps, final loss {last[1]:.4f}, train acc {last[2]:.3f}")
    for flag in result.flags:
        print(f"flagged: {flag}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    data = load_dataset(args.data, split="test")
    rep, _ = evaluate(args.ckpt, data, roi_mode=args.roi)
    table = rep.to_table(data.class_names)
    print(table, end="")
    kv = rep.to_kv_text()
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.txt").write_text(table)
        Path(f"{prefix}.kv").write_text(kv)
        print(f"wrote {prefix}.txt and {prefix}.kv")
    else:
        print(kv, end="")
    return 0


def _cmd_roigen(args) -> int:
    data = load_dataset(args.data)
    config = _load_config(args.config, data.num_classes)
    if args.mode == "cam":
        aux = train_aux_classifier(
            data,
            num_classes=data.num_classes,
            image_size=config.model.image_size,
            epochs=config.aux_epochs,
            lr=config.aux_lr,
            batch_size=config.batch_size,
            seed=config.seed + 1,
            log=print,
        )
        provider = CamRoiProvider(aux, target="label")
    else:
        provider = SegRoiProvider()
    _, stats = precompute_rois(data, provider, args.out, config.model.image_size)
    print(f"roi cache in {args.out}: {stats['computed']} computed, {stats['cached']} reused")
    return 0


def _cmd_saliency(args) -> int:
    out = export_saliency(args.ckpt, args.image, args.out)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "roigen":
            return _cmd_roigen(args)
        if args.command == "saliency":
            return _cmd_saliency(args)
        if args.command == "selftest":
            return run_selftest(log=print)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, DatasetError, GeneratorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
