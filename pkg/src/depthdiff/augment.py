"""Condition-input augmentations.

Three independent corruptions of the conditioning signal (never of the
diffusion target): a 3x3 Gaussian blur on RGB, additive Gaussian noise on
depth, and a joint random scale/shift.  All are pure numpy functions of
(input, parameters, seed); the composed ``apply_sr_condition_augment``
documents its draw order so a training step can be replayed exactly.

Channel-count conventions follow the dataset layout: 3 channels are RGB
(bilinear resampling, background 0), 1 channel is depth (nearest
neighbour, background -1), 4 channels are RGB-D and split accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

DEPTH_BACKGROUND = -1.0
RGB_BACKGROUND = 0.0


@dataclass(frozen=True)
class AugmentConfig:
    blur_prob: float = 0.5
    blur_sigma_max: float = 0.6
    depth_noise_sigma_max: float = 0.06
    scale_range: tuple[float, float] = (1.0, 1.0)
    shift_range: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError(f"blur_prob must lie in [0, 1], got {self.blur_prob}")
        if self.blur_sigma_max < 0.0 or self.depth_noise_sigma_max < 0.0:
            raise ValueError("sigma maxima must be >= 0")
        lo, hi = self.scale_range
        if lo <= 0.0 or hi < lo:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.shift_range < 0:
            raise ValueError(f"shift_range must be >= 0, got {self.shift_range}")


def gaussian_kernel3(sigma: float) -> np.ndarray:
    """Normalized 3x3 Gaussian; sigma=0 degenerates to the delta kernel."""
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        kernel = np.zeros((3, 3))
        kernel[1, 1] = 1.0
        return kernel
    offsets = np.array([-1.0, 0.0, 1.0])
    sq = offsets[:, None] ** 2 + offsets[None, :] ** 2
    kernel = np.exp(-sq / (2.0 * sigma**2))
    return kernel / kernel.sum()


def rgb_blur(rgb: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel 3x3 Gaussian blur with reflect padding at the borders."""
    kernel = gaussian_kernel3(sigma)
    return cv2.filter2D(
        rgb.astype(np.float32, copy=False), -1, kernel, borderType=cv2.BORDER_REFLECT_101
    )


def depth_noise(d: np.ndarray, sigma: float, rng_seed: int) -> np.ndarray:
    """Additive i.i.d. Gaussian noise; the output is NOT re-clipped to [-1,1]."""
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return d.astype(np.float32, copy=True)
    rng = np.random.default_rng(rng_seed)
    return (d + rng.normal(0.0, sigma, size=d.shape)).astype(np.float32)


def _fill_value(channels: int) -> tuple[float, ...]:
    if channels == 1:
        return (DEPTH_BACKGROUND,)
    if channels == 3:
        return (RGB_BACKGROUND,) * 3
    raise ValueError(f"expected 1 or 3 channels, got {channels}")


def _warp(img: np.ndarray, scale: float, shift: tuple[int, int], interp: int) -> np.ndarray:
    h, w = img.shape[:2]
    channels = 1 if img.ndim == 2 else img.shape[2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    matrix = np.array(
        [
            [scale, 0.0, shift[0] + (1.0 - scale) * cx],
            [0.0, scale, shift[1] + (1.0 - scale) * cy],
        ],
        dtype=np.float64,
    )
    return cv2.warpAffine(
        img,
        matrix,
        (w, h),
        flags=interp,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=_fill_value(channels),
    )


def apply_scale_shift(img: np.ndarray, scale: float, shift: tuple[int, int]) -> np.ndarray:
    """Rescale about the image center and translate by whole pixels.

    Vacated regions take the modality's background value.  A 4-channel
    input is treated as RGB-D: the same geometry is applied to both parts,
    bilinearly to RGB and nearest-neighbour to depth.
    """
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    img = img.astype(np.float32, copy=False)
    if img.ndim == 3 and img.shape[2] == 4:
        rgb = _warp(img[:, :, :3], scale, shift, cv2.INTER_LINEAR)
        d = _warp(img[:, :, 3], scale, shift, cv2.INTER_NEAREST)
        return np.concatenate([rgb, d[:, :, None]], axis=2)
    if img.ndim == 3 and img.shape[2] == 3:
        return _warp(img, scale, shift, cv2.INTER_LINEAR)
    d = img[:, :, 0] if img.ndim == 3 else img
    out = _warp(d, scale, shift, cv2.INTER_NEAREST)
    return out[:, :, None] if img.ndim == 3 else out


def _draw_scale_shift(cfg: AugmentConfig, rng: np.random.Generator) -> tuple[float, tuple[int, int]]:
    scale = float(rng.uniform(cfg.scale_range[0], cfg.scale_range[1]))
    if cfg.shift_range == 0:
        return scale, (0, 0)
    dx, dy = rng.integers(-cfg.shift_range, cfg.shift_range + 1, size=2)
    return scale, (int(dx), int(dy))


def random_scale_shift(img: np.ndarray, cfg: AugmentConfig, rng_seed: int) -> np.ndarray:
    """Apply a seeded random scale/shift; one seed = one joint transform."""
    rng = np.random.default_rng(rng_seed)
    scale, shift = _draw_scale_shift(cfg, rng)
    return apply_scale_shift(img, scale, shift)


def apply_sr_condition_augment(rgbd: np.ndarray, cfg: AugmentConfig, rng_seed: int) -> np.ndarray:
    """Full augmentation of a low-resolution RGB-D condition.

    Draw order (fixed for replayability): blur gate, blur sigma, depth
    noise sigma, noise field, scale, shift.  The blur applies to RGB with
    probability ``blur_prob``; the depth noise is ungated; the scale/shift
    is applied jointly to all four channels.
    """
    if rgbd.ndim != 3 or rgbd.shape[2] != 4:
        raise ValueError(f"expected [H, W, 4] input, got {rgbd.shape}")
    rng = np.random.default_rng(rng_seed)
    gate = float(rng.uniform())
    blur_sigma = float(rng.uniform(0.0, cfg.blur_sigma_max))
    noise_sigma = float(rng.uniform(0.0, cfg.depth_noise_sigma_max))

    rgb = rgbd[:, :, :3]
    if gate < cfg.blur_prob:
        rgb = rgb_blur(rgb, blur_sigma)
    d = rgbd[:, :, 3]
    if noise_sigma > 0.0:
        d = d + rng.normal(0.0, noise_sigma, size=d.shape)

    out = np.concatenate([rgb, d[:, :, None]], axis=2).astype(np.float32)
    scale, shift = _draw_scale_shift(cfg, rng)
    return apply_scale_shift(out, scale, shift)
