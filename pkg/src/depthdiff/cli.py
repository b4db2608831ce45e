"""Command-line surface.

Subcommands:

    make-synthetic   render a procedural RGB-D dataset
    train            run a training loop from a config file
    sample           generate depth for an input (stage 1, 2, or full)
    eval             score a checkpoint against a dataset split

Every failure exits nonzero after printing one ``error: <category>: ...``
line to stderr; categories map to stable exit codes (config=3, data=4,
training=5, sampling=6, anything else=1).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataio, metrics, pipeline
from .config import read_config
from .diffusion import DivergedSamplingError


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthdiff",
        description="Two-stage conditional depth generation from RGB images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="render a procedural RGB-D dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--resolution", type=int, required=True, help="square image size")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run a training loop from a config file")
    p.add_argument("--config", required=True, help="config file path")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument(
        "--run-dir",
        default=None,
        help="output directory (default: <config path minus suffix>.run)",
    )

    p = sub.add_parser("sample", help="generate depth for an input image")
    p.add_argument("--stage", choices=("1", "2", "full"), required=True)
    p.add_argument(
        "--ckpt",
        action="append",
        required=True,
        help="checkpoint path; pass twice (stage 1 then stage 2) for --stage full",
    )
    p.add_argument(
        "--input",
        required=True,
        help="RGB png (stages 1/full) or the png of an RGB-D pair (stage 2)",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--emit-pointcloud",
        action="store_true",
        help="also write one point-cloud text file per output",
    )
    p.add_argument(
        "--drop-background",
        action="store_true",
        help="omit background points from emitted point clouds",
    )

    p = sub.add_parser("eval", help="score a checkpoint against a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="report file path")
    p.add_argument("--split", choices=("train", "test"), default="test")

    return parser


def _read_input_rgb(path: str) -> dataio.RgbImage:
    try:
        return dataio.read_rgb_png(path)
    except (OSError, ValueError) as exc:
        raise pipeline.DataError(f"cannot read RGB input {path}: {exc}") from exc


def _read_input_rgbd(path: str) -> dataio.RgbdImage:
    png = Path(path)
    try:
        return dataio.read_rgbd_files(png, png.with_suffix(".pfm"))
    except (OSError, ValueError) as exc:
        raise pipeline.DataError(f"cannot read RGB-D input {path}: {exc}") from exc


def _emit_cloud(path: Path, image, drop_background: bool) -> None:
    cloud = dataio.to_point_cloud(image, drop_background=drop_background)
    np.savetxt(path, cloud, fmt="%.8g", delimiter=" ")
    print(path)


def _cmd_make_synthetic(args) -> int:
    try:
        train_manifest, test_manifest = dataio.generate_synthetic(
            args.out, args.count, args.resolution, args.seed
        )
    except ValueError as exc:
        raise pipeline.ConfigError(str(exc)) from exc
    print(
        f"wrote {len(train_manifest.sample_ids)} train + "
        f"{len(test_manifest.sample_ids)} test samples to {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    config_path = Path(args.config)
    try:
        cfg = read_config(config_path)
    except OSError as exc:
        raise pipeline.ConfigError(f"cannot read config {config_path}: {exc}") from exc
    except ValueError as exc:
        raise pipeline.ConfigError(f"bad config {config_path}: {exc}") from exc
    run_dir = Path(args.run_dir) if args.run_dir else config_path.with_suffix(".run")
    final = pipeline.train(cfg, run_dir, resume=args.resume)
    print(final)
    return 0


def _require_ckpts(args, count: int) -> list[str]:
    if len(args.ckpt) != count:
        raise pipeline.ConfigError(
            f"--stage {args.stage} needs exactly {count} --ckpt argument(s), "
            f"got {len(args.ckpt)}"
        )
    return args.ckpt


def _cmd_sample(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    if args.stage == "1":
        (ckpt,) = _require_ckpts(args, 1)
        result = pipeline.run_stage1(ckpt, _read_input_rgb(args.input), seed=args.seed)
        png, pfm = out_dir / f"{stem}_stage1.png", out_dir / f"{stem}_stage1.pfm"
        dataio.write_rgbd_files(png, pfm, result)
        print(png)
        print(pfm)
        if args.emit_pointcloud:
            _emit_cloud(out_dir / f"{stem}_stage1.xyz", result, args.drop_background)
    elif args.stage == "2":
        (ckpt,) = _require_ckpts(args, 1)
        rgbd = _read_input_rgbd(args.input)
        depth = pipeline.run_stage2(ckpt, rgbd, seed=args.seed)
        pfm = out_dir / f"{stem}_stage2.pfm"
        dataio.write_pfm(pfm, depth.values[:, :, 0])
        print(pfm)
        for name, baseline in pipeline.baseline_upsample(
            rgbd.depth, depth.resolution
        ).items():
            baseline_path = out_dir / f"{stem}_{name}.pfm"
            dataio.write_pfm(baseline_path, baseline.values[:, :, 0])
            print(baseline_path)
        if args.emit_pointcloud:
            _emit_cloud(out_dir / f"{stem}_stage2.xyz", depth, args.drop_background)
    else:
        ckpt1, ckpt2 = _require_ckpts(args, 2)
        result = pipeline.run_pipeline(
            ckpt1, ckpt2, _read_input_rgb(args.input), seed1=args.seed, seed2=args.seed + 1
        )
        png, pfm = out_dir / f"{stem}_full.png", out_dir / f"{stem}_full.pfm"
        dataio.write_rgbd_files(png, pfm, result)
        print(png)
        print(pfm)
        if args.emit_pointcloud:
            _emit_cloud(out_dir / f"{stem}_full.xyz", result, args.drop_background)
    return 0


def _cmd_eval(args) -> int:
    step = int(pipeline.load_checkpoint(args.ckpt)["step"])
    report = pipeline.evaluate_checkpoint(args.ckpt, args.data, split=args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.unlink(missing_ok=True)
    metrics.append_eval_log(out, step, report)
    print(out)
    return 0


_COMMANDS = {
    "make-synthetic": _cmd_make_synthetic,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    torch.set_num_threads(1)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except pipeline.PipelineError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except DivergedSamplingError as exc:
        print(f"error: sampling: {exc}", file=sys.stderr)
        return 6
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
