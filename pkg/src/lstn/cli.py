"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgio
from . import dataio, tnsr
from .density import density_for_frame
from .errors import ConfigError, LSTNError, UsageError
from .evaluation import evaluate, export_density_viz
from .experiments import run_ablation
from .lst import warp
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, load_checkpoint, new_model, save_checkpoint, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser, cls) -> None:
    for key in cfgio.field_keys(cls):
        names = [f"--{key.replace('_', '-')}"]
        if "_" in key:
            names.append(f"--{key}")
        p.add_argument(*names, dest=f"cfg_{key}", default=None, metavar="V")


def _build_config(cls, args):
    values = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        values.update(cfgio.parse_pairs(text))
    for key in cfgio.field_keys(cls):
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            values[key] = v
    obj = cfgio.from_mapping(cls, values)
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lstn", description="Video crowd counting with block-wise spatial transformers.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic videos (P5 frames + FDA1 annotations)")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=1)
    p.add_argument("--max-heads", type=int, default=None)
    p.add_argument("--config")
    _add_config_flags(p, dataio.SynthConfig)

    p = sub.add_parser("density", help="rasterize annotations into TNSR density maps")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--downsample", type=int, default=1)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_config_flags(p, TrainConfig)

    p = sub.add_parser("eval", help="evaluate counts (MAE / MSE) on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="use ground-truth density maps as predictions")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--downsample", type=int, default=None)
    p.add_argument("--out")

    p = sub.add_parser("ablate-similarity", help="compare similarity weighting against all-ones weights")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    p.add_argument("--config")
    _add_config_flags(p, TrainConfig)

    p = sub.add_parser("warp-demo", help="warp a TNSR density map with an affine transform")
    p.add_argument("--input", required=True)
    p.add_argument("--theta", required=True, nargs=6, type=float, metavar="T")
    p.add_argument("--out", required=True)

    p = sub.add_parser("viz", help="render a TNSR density map as a P5 image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_synth(args, out) -> None:
    cfg = _build_config(dataio.SynthConfig, args)
    if args.videos < 1:
        raise UsageError("--videos must be >= 1")
    hi = args.max_heads if args.max_heads is not None else cfg.heads
    videos = dataio.synth_dataset(args.videos, cfg, seed=cfg.seed, head_range=(cfg.heads, hi))
    dataio.save_dataset(videos, args.out)
    for v in videos:
        print(f"video {v.video_id} frames {len(v.frames)} heads {v.annotation.counts()[0]}", file=out)


def _cmd_density(args, out) -> None:
    if args.downsample < 1 or args.sigma <= 0:
        raise UsageError("--downsample must be >= 1 and --sigma > 0")
    ann = dataio.load_annotations(args.annotations)
    if ann.width % args.downsample or ann.height % args.downsample:
        raise ConfigError(f"{ann.width}x{ann.height} not divisible by downsample {args.downsample}")
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for t, heads in enumerate(ann.frames):
        m = density_for_frame(heads, ann.height, ann.width, args.downsample, args.sigma, frame=t)
        tnsr.save(m.grid.data, d / f"frame_{t:04d}.tnsr")
    print(f"wrote {len(ann.frames)} density maps to {d}", file=out)


def _cmd_train(args, out) -> None:
    cfg = _build_config(TrainConfig, args)
    videos = dataio.load_dataset(args.data)
    model = new_model(cfg)
    train(model, videos, cfg, on_epoch=lambda s: print(s.line(), file=out, flush=True))
    save_checkpoint(model, cfg, args.out)


def _cmd_eval(args, out) -> None:
    if args.checkpoint is None and not args.oracle:
        raise UsageError("eval needs --checkpoint or --oracle")
    model, cfg = (load_checkpoint(args.checkpoint) if args.checkpoint else (None, TrainConfig()))
    sigma = args.sigma if args.sigma is not None else cfg.sigma
    videos = dataio.load_dataset(args.data)
    if args.oracle and model is None:
        cfg = dataclasses.replace(cfg, downsample=args.downsample or 1)
        model_for_dims = None
    else:
        model_for_dims = model
    echo = {k: cfgio.format_value(v) for k, v in dataclasses.asdict(cfg).items()}
    report = evaluate(model_for_dims, videos, sigma=sigma, oracle=args.oracle, config_echo=echo)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    out.write(text)


def _cmd_ablate(args, out) -> None:
    cfg = _build_config(TrainConfig, args)
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    except ValueError:
        raise UsageError(f"bad --seeds {args.seeds!r}") from None
    train_v = dataio.load_dataset(args.train)
    test_v = dataio.load_dataset(args.test)
    res = run_ablation(train_v, test_v, cfg, seeds, variants=("full", "ones"))
    for variant, label in (("full", "with-similarity"), ("ones", "without-similarity")):
        print(f"{label} mae {res.median_mae(variant)!r} mse {res.median_mse(variant)!r}", file=out)


def _cmd_warp(args, out) -> None:
    src = tnsr.load(args.input)
    if src.ndim != 2:
        raise ConfigError(f"warp-demo expects a 2-D map, got shape {src.shape}")
    with no_grad():
        res = warp(Tensor(src), Tensor(np.asarray(args.theta, dtype=np.float32).reshape(2, 3)))
    tnsr.save(res.data, args.out)


def _cmd_viz(args, out) -> None:
    export_density_viz(tnsr.load(args.input), args.out)


COMMANDS = {
    "synth": _cmd_synth,
    "density": _cmd_density,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate-similarity": _cmd_ablate,
    "warp-demo": _cmd_warp,
    "viz": _cmd_viz,
}


def run_cli(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        COMMANDS[args.command](args, out)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=err)
        parser.print_usage(err)
        return 1
    except (LSTNError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=logging.WARNING)
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
