"""Training loop, checkpointing, and the two-stage sampling orchestration.

A training run owns one directory:

    <run_dir>/config.snapshot   canonical config text, hashed into checkpoints
    <run_dir>/log.tsv           one row per optimizer step
    <run_dir>/ckpt_<step>.bin   versioned checkpoint container
    <run_dir>/report.tsv        periodic evaluation rows (when enabled)
    <run_dir>/samples/          reserved for sampling output

Every stochastic draw -- batch selection, condition augmentation, the
diffusion (t, noise) pair, dropout and stochastic depth inside the network --
is seeded from (config seed, global step, purpose, item) counters rather than
ambient RNG state.  Training is therefore bit-reproducible, and resuming from
a checkpoint replays exactly the run that would have happened without the
interruption.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import backbone, dataio, diffusion, metrics
from .augment import apply_sr_condition_augment
from .backbone import build_denoiser, upsample_condition_rgbd
from .config import RunConfig, config_hash, parse_text, to_text
from .schedule import NoiseSchedule, build_cosine_schedule, build_linear_schedule

CHECKPOINT_VERSION = 1
GRAD_CLIP_NORM = 1.0
LOG_HEADER = "step\tlr\tloss\tloss_denoise\tloss_vlb"

# purpose codes for derived seeds
_INIT, _BATCH, _AUGMENT, _NOISE, _NET, _SAMPLE = range(6)


class PipelineError(Exception):
    """Base for categorized failures; the CLI maps these to exit codes."""

    category = "internal"
    exit_code = 1


class ConfigError(PipelineError):
    category = "config"
    exit_code = 3


class DataError(PipelineError):
    category = "data"
    exit_code = 4


class TrainingAborted(PipelineError):
    category = "training"
    exit_code = 5


def derived_seed(*parts: int) -> int:
    """Collapse integer counters into one RNG seed, order-sensitively."""
    return int(np.random.SeedSequence(parts).generate_state(1, dtype=np.uint32)[0])


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    if cfg.schedule == "linear":
        return build_linear_schedule(cfg.diffusion_steps)
    return build_cosine_schedule(cfg.diffusion_steps)


def learning_rate_at(cfg: RunConfig, step: int) -> float:
    """Constant, or linear warmup followed by cosine cycles down to 0.1x."""
    alpha = cfg.learning_rate
    if cfg.lr_schedule == "none":
        return alpha
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return alpha * step / cfg.warmup_steps
    phase = ((step - cfg.warmup_steps) % cfg.cycle_length) / cfg.cycle_length
    return 0.1 * alpha + 0.9 * alpha * 0.5 * (1.0 + math.cos(math.pi * phase))


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path: Path, cfg: RunConfig, net, optimizer, step: int) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config_hash": config_hash(cfg),
            "config_text": to_text(cfg),
            "step": step,
            "model": net.state_dict(),
            "optimizer": optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path} has an unsupported format")
    return blob


def restore_net(blob: dict):
    """Rebuild the (config, network) pair a checkpoint was trained with."""
    cfg = parse_text(blob["config_text"])
    net = build_denoiser(cfg.model)
    net.load_state_dict(blob["model"])
    net.eval()
    return cfg, net


# ------------------------------------------------------- dataset preparation


def _prepared_items(cfg: RunConfig, split: str):
    """Per-sample training inputs: the diffusion target as a [H, W, 1]
    tensor plus the not-yet-augmented condition raster (numpy)."""
    try:
        _, images = dataio.read_split(cfg.dataset_root, split)
    except OSError as exc:
        raise DataError(f"cannot read dataset split {split!r}: {exc}") from exc
    if not images:
        raise DataError(f"dataset split {split!r} under {cfg.dataset_root} is empty")
    out_dims = (cfg.out_resolution, cfg.out_resolution)
    cond_dims = (cfg.cond_resolution, cfg.cond_resolution)
    items = []
    for image in images:
        x0 = torch.from_numpy(dataio.resample(image.depth, out_dims).values)
        if cfg.stage == "depth_diffusion":
            cond = dataio.resample(image.rgb, cond_dims).values
        else:
            cond = dataio.resample_rgbd(image, cond_dims).to_array()
        items.append((x0, cond))
    return items


def _augmented_condition(cfg: RunConfig, cond: np.ndarray, seed: int) -> torch.Tensor:
    """Apply the per-sample condition corruption and lift to the model grid.

    Stage 1 conditions are RGB; they ride through the shared RGB-D transform
    with a throwaway background depth channel so both stages share one draw
    order, then drop it again.
    """
    if cfg.stage == "depth_diffusion":
        rgbd = np.concatenate(
            [cond, np.full(cond.shape[:2] + (1,), -1.0, dtype=np.float32)], axis=2
        )
        augmented = apply_sr_condition_augment(rgbd, cfg.augment, seed)[:, :, :3]
    else:
        low = apply_sr_condition_augment(cond, cfg.augment, seed)
        augmented = upsample_condition_rgbd(
            low, (cfg.out_resolution, cfg.out_resolution)
        )
    return torch.from_numpy(np.ascontiguousarray(augmented))


# ------------------------------------------------------------------ training


def train(cfg: RunConfig, run_dir, resume=None) -> Path:
    """Run the training loop and return the final checkpoint path."""
    torch.set_num_threads(1)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(exist_ok=True)
    (run_dir / "config.snapshot").write_text(to_text(cfg))

    schedule = build_schedule(cfg)
    items = _prepared_items(cfg, "train")
    n_items = len(items)
    steps_per_epoch = math.ceil(n_items / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    torch.manual_seed(derived_seed(cfg.seed, 0, _INIT))
    net = build_denoiser(cfg.model)
    optimizer = torch.optim.Adam(
        net.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2)
    )

    start_step = 0
    last_good: Optional[Path] = None
    if resume is not None:
        blob = load_checkpoint(resume)
        if blob["config_hash"] != config_hash(cfg):
            raise ConfigError(
                f"checkpoint {resume} was trained with a different config"
            )
        net.load_state_dict(blob["model"])
        optimizer.load_state_dict(blob["optimizer"])
        torch.set_rng_state(blob["torch_rng"])
        start_step = int(blob["step"])
        last_good = Path(resume)

    log_path = run_dir / "log.tsv"
    if resume is not None and log_path.exists():
        # Keep only rows from before the resume point so an interrupted run
        # that logged past its last checkpoint still resumes cleanly.
        kept = [
            line
            for line in log_path.read_text().splitlines()
            if not line[:1].isdigit() or int(line.split("\t", 1)[0]) < start_step
        ]
        log_path.write_text("\n".join(kept) + "\n" if kept else "")
        fresh_log = not kept
    else:
        fresh_log = True
    with log_path.open("w" if fresh_log else "a") as log:
        if fresh_log:
            log.write(LOG_HEADER + "\n")
        net.train()
        for step in range(start_step, total_steps):
            lr = learning_rate_at(cfg, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch_rng = np.random.default_rng(derived_seed(cfg.seed, step, _BATCH))
            indices = batch_rng.choice(
                n_items, size=min(cfg.batch_size, n_items), replace=False
            )
            optimizer.zero_grad()
            loss_total = 0.0
            denoise_total = 0.0
            vlb_total = 0.0
            try:
                for slot, index in enumerate(indices):
                    x0, cond_raw = items[index]
                    cond = _augmented_condition(
                        cfg, cond_raw, derived_seed(cfg.seed, step, _AUGMENT, slot)
                    )
                    state, closure = diffusion.training_step_target(
                        x0,
                        cond,
                        schedule,
                        derived_seed(cfg.seed, step, _NOISE, slot),
                        weighting=cfg.weighting,
                        variance_mode=cfg.model.variance_mode,
                        k=cfg.p2_k,
                        gamma=cfg.p2_gamma,
                        lambda_vlb=cfg.lambda_vlb,
                    )
                    out = backbone.forward(
                        net,
                        state,
                        train_mode=True,
                        rng_seed=derived_seed(cfg.seed, step, _NET, slot),
                    )
                    loss, parts = closure(out, return_parts=True)
                    (loss / len(indices)).backward()
                    loss_total += float(loss.detach())
                    denoise_total += float(parts["loss_simple"].detach())
                    if parts["loss_vlb"] is not None:
                        vlb_total += float(parts["loss_vlb"].detach())
            except ValueError as exc:
                # A diverged network trips the non-finite output validation
                # before the loss itself ever reads as NaN.
                if "non-finite" not in str(exc):
                    raise
                raise TrainingAborted(
                    f"diverged at step {step} ({exc}); last good checkpoint: "
                    f"{last_good if last_good is not None else 'none'}"
                ) from exc
            loss_mean = loss_total / len(indices)
            if not math.isfinite(loss_mean):
                raise TrainingAborted(
                    f"non-finite loss at step {step}; last good checkpoint: "
                    f"{last_good if last_good is not None else 'none'}"
                )
            torch.nn.utils.clip_grad_norm_(net.parameters(), GRAD_CLIP_NORM)
            optimizer.step()
            log.write(
                f"{step}\t{lr!r}\t{loss_mean!r}\t"
                f"{denoise_total / len(indices)!r}\t{vlb_total / len(indices)!r}\n"
            )
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == total_steps:
                ckpt_path = run_dir / f"ckpt_{done}.bin"
                save_checkpoint(ckpt_path, cfg, net, optimizer, done)
                last_good = ckpt_path
            if cfg.eval_every and done % cfg.eval_every == 0:
                net.eval()
                report = _evaluate_net(cfg, net, schedule, items[:4])
                metrics.append_eval_log(run_dir / "report.tsv", done, report)
                net.train()
    net.eval()
    assert last_good is not None
    return last_good


def _evaluate_net(cfg, net, schedule, items, with_vlb=False) -> metrics.EvalReport:
    dataset = [
        (x0, _augmented_condition_clean(cfg, cond)) for x0, cond in items
    ]
    return metrics.evaluate(
        backbone.as_denoiser(net),
        dataset,
        schedule,
        rng_seed=derived_seed(cfg.seed, 0, _SAMPLE),
        with_vlb=with_vlb,
    )


def _augmented_condition_clean(cfg: RunConfig, cond: np.ndarray) -> torch.Tensor:
    """The un-corrupted conditioning tensor on the model grid."""
    if cfg.stage == "depth_diffusion":
        return torch.from_numpy(cond)
    lifted = upsample_condition_rgbd(cond, (cfg.out_resolution, cfg.out_resolution))
    return torch.from_numpy(np.ascontiguousarray(lifted))


def evaluate_checkpoint(
    ckpt_path, data_root, split: str = "test", with_vlb: bool = True
) -> metrics.EvalReport:
    """Score a trained model against a dataset split's ground truth."""
    blob = load_checkpoint(ckpt_path)
    cfg, net = restore_net(blob)
    cfg = _with_dataset(cfg, str(data_root))
    schedule = build_schedule(cfg)
    items = _prepared_items(cfg, split)
    return _evaluate_net(cfg, net, schedule, items, with_vlb=with_vlb)


def _with_dataset(cfg: RunConfig, root: str) -> RunConfig:
    return dataclasses.replace(cfg, dataset_root=root)


# ------------------------------------------------------------------ sampling


def _sample_depth(cfg, net, schedule, condition: torch.Tensor, seed: int) -> np.ndarray:
    values = diffusion.sample_loop(
        backbone.as_denoiser(net),
        condition,
        (cfg.out_resolution, cfg.out_resolution, 1),
        schedule,
        rng_seed=seed,
    )
    return np.clip(values.numpy().astype(np.float32), -1.0, 1.0)


def run_stage1(ckpt_path, rgb: dataio.RgbImage, seed: int = 0) -> dataio.RgbdImage:
    """Downsample the RGB input to the model grid, generate a depth map for
    it, and return the aligned low-resolution RGB-D pair."""
    blob = load_checkpoint(ckpt_path)
    cfg, net = restore_net(blob)
    if cfg.stage != "depth_diffusion":
        raise ConfigError(f"{ckpt_path} is not a first-stage checkpoint")
    schedule = build_schedule(cfg)
    cond_rgb = dataio.resample(rgb, (cfg.cond_resolution, cfg.cond_resolution))
    condition = torch.from_numpy(cond_rgb.values)
    depth = _sample_depth(cfg, net, schedule, condition, seed)
    return dataio.RgbdImage(cond_rgb, dataio.DepthMap(depth))


def run_stage2(ckpt_path, rgbd: dataio.RgbdImage, seed: int = 0) -> dataio.DepthMap:
    """Upsample the RGB-D condition to the target grid and generate the
    high-resolution depth map."""
    blob = load_checkpoint(ckpt_path)
    cfg, net = restore_net(blob)
    if cfg.stage != "super_resolution":
        raise ConfigError(f"{ckpt_path} is not a second-stage checkpoint")
    if rgbd.resolution != (cfg.cond_resolution, cfg.cond_resolution):
        raise DataError(
            f"condition is {rgbd.resolution}, checkpoint expects "
            f"{cfg.cond_resolution} pixels"
        )
    schedule = build_schedule(cfg)
    lifted = upsample_condition_rgbd(
        rgbd.to_array(), (cfg.out_resolution, cfg.out_resolution)
    )
    condition = torch.from_numpy(np.ascontiguousarray(lifted))
    depth = _sample_depth(cfg, net, schedule, condition, seed)
    return dataio.DepthMap(depth)


def baseline_upsample(depth: dataio.DepthMap, target) -> dict[str, dataio.DepthMap]:
    """Classical single-image baselines for side-by-side comparison."""
    import cv2

    height, width = target
    nearest = dataio.resample(depth, target)
    bilinear = cv2.resize(
        depth.values[:, :, 0], (width, height), interpolation=cv2.INTER_LINEAR
    )
    return {
        "nearest": nearest,
        "bilinear": dataio.DepthMap(np.clip(bilinear, -1.0, 1.0)[:, :, None]),
    }


def run_pipeline(
    ckpt_stage1, ckpt_stage2, rgb: dataio.RgbImage, seed1: int = 0, seed2: int = 0
) -> dataio.RgbdImage:
    """Full two-stage generation: the returned image carries the *original*
    RGB input untouched next to the super-resolved depth."""
    cfg2 = parse_text(load_checkpoint(ckpt_stage2)["config_text"])
    if rgb.resolution != (cfg2.out_resolution, cfg2.out_resolution):
        raise DataError(
            f"input RGB is {rgb.resolution}, the pipeline produces "
            f"{cfg2.out_resolution} pixels"
        )
    low = run_stage1(ckpt_stage1, rgb, seed=seed1)
    if low.resolution != (cfg2.cond_resolution, cfg2.cond_resolution):
        raise ConfigError(
            f"stage-1 output {low.resolution} does not match the stage-2 "
            f"condition grid {cfg2.cond_resolution}"
        )
    depth = run_stage2(ckpt_stage2, low, seed=seed2)
    return dataio.RgbdImage(dataio.RgbImage(rgb.values.copy()), depth)
