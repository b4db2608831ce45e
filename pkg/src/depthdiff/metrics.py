"""Evaluation metrics and reports.

MAE and MSE are reported on the [-1, 1] value range and multiplied by
10^3; IoU binarizes at the background threshold (default -0.95, the
value separating subject from the -1 background).  All three are
computed over every pixel, background included.

``evaluate`` generates a depth prediction per dataset item through the
reverse diffusion loop and aggregates the three raster metrics plus the
variational bound in bits/dim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import torch

from depthdiff import diffusion
from depthdiff.schedule import NoiseSchedule

BACKGROUND_THRESHOLD = -0.95
METRIC_SCALE = 1e3


def _check_shapes(d_gt: torch.Tensor, d_pred: torch.Tensor) -> None:
    if d_gt.shape != d_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(d_gt.shape)} vs {tuple(d_pred.shape)}")


def mae(d_gt: torch.Tensor, d_pred: torch.Tensor) -> float:
    _check_shapes(d_gt, d_pred)
    return float(torch.mean(torch.abs(d_gt - d_pred))) * METRIC_SCALE


def mse(d_gt: torch.Tensor, d_pred: torch.Tensor) -> float:
    _check_shapes(d_gt, d_pred)
    return float(torch.mean((d_gt - d_pred) ** 2)) * METRIC_SCALE


def foreground_mask(d: torch.Tensor, phi: float = BACKGROUND_THRESHOLD) -> torch.Tensor:
    """Binary subject mask: everything strictly above the threshold."""
    return d > phi


def iou(d_gt: torch.Tensor, d_pred: torch.Tensor, phi: float = BACKGROUND_THRESHOLD) -> float:
    """Silhouette intersection-over-union; empty union counts as perfect."""
    _check_shapes(d_gt, d_pred)
    gt = foreground_mask(d_gt, phi)
    pred = foreground_mask(d_pred, phi)
    union = int((gt | pred).sum())
    if union == 0:
        return 1.0
    return int((gt & pred).sum()) / union


@dataclass(frozen=True)
class EvalReport:
    mae: float
    mse: float
    iou: float
    vlb_bits_per_dim: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou must lie in [0, 1], got {self.iou}")
        if self.mae < 0.0 or self.mse < 0.0:
            raise ValueError("mae and mse must be >= 0")

    def write(self, path: str | Path) -> None:
        lines = [
            f"mae={self.mae!r}",
            f"mse={self.mse!r}",
            f"iou={self.iou!r}",
            f"vlb_bits_per_dim={self.vlb_bits_per_dim!r}",
            f"n_samples={self.n_samples}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        fields = {}
        for line in Path(path).read_text().splitlines():
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        return cls(
            mae=float(fields["mae"]),
            mse=float(fields["mse"]),
            iou=float(fields["iou"]),
            vlb_bits_per_dim=float(fields["vlb_bits_per_dim"]),
            n_samples=int(fields["n_samples"]),
        )


EVAL_LOG_HEADER = "step\tmae\tmse\tiou\tvlb_bits_per_dim"


def append_eval_log(path: str | Path, step: int, report: EvalReport) -> None:
    """Append one evaluation line to a TSV log, writing the header once."""
    path = Path(path)
    line = f"{step}\t{report.mae!r}\t{report.mse!r}\t{report.iou!r}\t{report.vlb_bits_per_dim!r}\n"
    if not path.exists():
        path.write_text(EVAL_LOG_HEADER + "\n" + line)
    else:
        with path.open("a") as fh:
            fh.write(line)


def evaluate(
    denoiser: diffusion.Denoiser,
    dataset: Iterable[tuple[torch.Tensor, Optional[torch.Tensor]]],
    s: NoiseSchedule,
    rng_seed: int = 0,
    clip_x0: bool = True,
    phi: float = BACKGROUND_THRESHOLD,
    with_vlb: bool = True,
) -> EvalReport:
    """Sample one prediction per (ground truth, condition) item and average.

    Per-item sampling seeds are derived from ``rng_seed`` so the whole
    evaluation is replayable; a diverged reverse pass propagates.  The
    bound is skipped (reported as nan) when ``with_vlb`` is false, which
    spares T denoiser calls per item.
    """
    items = list(dataset)
    if not items:
        raise ValueError("evaluate needs a non-empty dataset")
    maes, mses, ious = [], [], []
    for i, (x0, condition) in enumerate(items):
        pred = diffusion.sample_loop(
            denoiser, condition, x0.shape, s, rng_seed + 104729 * i, clip_x0=clip_x0
        )
        maes.append(mae(x0, pred))
        mses.append(mse(x0, pred))
        ious.append(iou(x0, pred, phi))
    vlb = (
        diffusion.eval_vlb(denoiser, items, s, rng_seed=rng_seed, clip_x0=clip_x0)
        if with_vlb
        else math.nan
    )
    n = len(items)
    return EvalReport(
        mae=sum(maes) / n,
        mse=sum(mses) / n,
        iou=sum(ious) / n,
        vlb_bits_per_dim=vlb,
        n_samples=n,
    )
