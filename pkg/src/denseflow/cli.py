"""Command-line driver: train, eval, sample, verify, import, info.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric or training
failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .config import TrainConfig, config_from_text, config_to_text
from .datasets import load_raw, read_dataset, write_dataset, write_ppm
from .errors import (
    ConfigError,
    DataFormatError,
    DenseFlowError,
    NumericDomainError,
    NumericError,
    TrainingError,
)
from .evaluation import evaluate
from .model import PRESETS, FlowModel

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="denseflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="config file path")
    p_train.add_argument("--data", required=True, help="DFIM dataset path")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--seed", type=int, help="override the config seed")

    p_eval = sub.add_parser("eval", help="evaluate bits/dim on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--mc-samples", type=int, default=1)
    p_eval.add_argument("--batch-size", type=int, default=64)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--json", action="store_true",
                        help="emit the machine-readable report")

    p_sample = sub.add_parser("sample", help="generate images as PPM files")
    p_sample.add_argument("--ckpt", required=True)
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--temperature", type=float, default=0.8)
    p_sample.add_argument("--out", required=True, help="output directory")
    p_sample.add_argument("--seed", type=int, default=0)

    sub.add_parser("verify", help="run the property suite")

    p_import = sub.add_parser("import", help="convert raw u8 planar pixels to DFIM")
    p_import.add_argument("--input", required=True)
    p_import.add_argument("--count", type=int, required=True)
    p_import.add_argument("--channels", type=int, required=True)
    p_import.add_argument("--height", type=int, required=True)
    p_import.add_argument("--width", type=int, required=True)
    p_import.add_argument("--out", required=True)

    p_info = sub.add_parser("info", help="parameter counts and shape trace")
    group = p_info.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="config file path")
    group.add_argument("--ckpt", help="checkpoint path")
    group.add_argument("--preset", choices=sorted(PRESETS))
    return parser


def _read_text(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as err:
        raise DataFormatError(f"cannot read {path}: {err}") from err


def cmd_train(args):
    from .training import load_checkpoint, train

    flow_cfg, train_cfg, _ = config_from_text(_read_text(args.config))
    if train_cfg is None:
        train_cfg = TrainConfig()
    if args.seed is not None:
        flow_cfg = dataclasses.replace(flow_cfg, seed=args.seed)
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    dataset = read_dataset(args.data)
    if tuple(dataset.pixels.shape[1:]) != tuple(flow_cfg.image_shape):
        raise DataFormatError(
            f"dataset images {dataset.pixels.shape[1:]} do not match config "
            f"image_shape {flow_cfg.image_shape}"
        )
    print(config_to_text(flow_cfg, train_cfg), end="")
    resume = None
    model = FlowModel(flow_cfg)
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.flow_config != flow_cfg:
            raise DataFormatError("checkpoint config does not match --config")
    every = 5 * max(1, len(dataset.pixels) // train_cfg.batch_size)
    result = train(model, dataset.pixels, train_cfg, out_dir=args.out,
                   resume=resume, checkpoint_every=every)
    last = result.metrics[-1] if result.metrics else {"bpd": float("nan")}
    print(f"trained {result.steps_run} steps, final bpd {last['bpd']:.4f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.dfck')}")
    return EXIT_OK


def cmd_eval(args):
    from .training import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model, _ = model_from_checkpoint(ckpt)
    print(config_to_text(model.config), end="")
    dataset = read_dataset(args.data)
    report = evaluate(model, dataset.pixels, mc_samples=args.mc_samples,
                      seed=args.seed, batch_size=args.batch_size)
    if args.json:
        print(report.to_json())
    else:
        for line in report.lines():
            print(line)
    return EXIT_OK


def cmd_sample(args):
    from .training import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model, _ = model_from_checkpoint(ckpt)
    model.eval()
    print(config_to_text(model.config), end="")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    images = model.sample(args.n, temperature=args.temperature, rng=rng)
    for i, img in enumerate(images):
        path = os.path.join(args.out, f"sample_{i:04d}.ppm")
        write_ppm(path, img)
    print(f"wrote {len(images)} images to {args.out}")
    return EXIT_OK


def cmd_verify(_args):
    from .verify import run_all

    return EXIT_OK if run_all() else EXIT_VERIFY


def cmd_import(args):
    dataset = load_raw(args.input, args.count, args.channels, args.height,
                       args.width)
    write_dataset(args.out, dataset)
    print(f"imported {dataset.count} images "
          f"({dataset.channels}x{dataset.height}x{dataset.width}) to {args.out}")
    return EXIT_OK


def cmd_info(args):
    if args.preset:
        flow_cfg = PRESETS[args.preset]()
    elif args.config:
        flow_cfg, _, _ = config_from_text(_read_text(args.config))
    else:
        from .training import load_checkpoint

        flow_cfg = load_checkpoint(args.ckpt).flow_config
    print(config_to_text(flow_cfg), end="")
    model = FlowModel(flow_cfg)
    print(model.describe())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "verify": cmd_verify,
    "import": cmd_import,
    "info": cmd_info,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (DataFormatError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericError, NumericDomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except DenseFlowError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
