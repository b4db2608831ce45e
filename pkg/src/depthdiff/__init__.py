"""Two-stage conditional diffusion for depth generation and super-resolution."""

from depthdiff.backbone import ModelConfig, build_denoiser, upsample_condition_rgbd
from depthdiff.config import RunConfig, from_preset, read_config, write_config
from depthdiff.dataio import DepthMap, RgbdImage, RgbImage, generate_synthetic
from depthdiff.diffusion import (
    DenoiserOutput,
    DiffusionState,
    eval_vlb,
    p_step,
    q_posterior,
    q_sample,
    sample_loop,
    training_step_target,
)
from depthdiff.schedule import (
    NoiseSchedule,
    build_cosine_schedule,
    build_linear_schedule,
    p2_weight,
)

__all__ = [
    "DenoiserOutput",
    "DepthMap",
    "DiffusionState",
    "ModelConfig",
    "NoiseSchedule",
    "RgbImage",
    "RgbdImage",
    "RunConfig",
    "build_cosine_schedule",
    "build_denoiser",
    "build_linear_schedule",
    "eval_vlb",
    "from_preset",
    "generate_synthetic",
    "p2_weight",
    "p_step",
    "q_posterior",
    "q_sample",
    "read_config",
    "sample_loop",
    "training_step_target",
    "upsample_condition_rgbd",
    "write_config",
]

__version__ = "0.1.0"
