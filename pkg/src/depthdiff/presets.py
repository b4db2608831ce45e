"""Named training-run presets.

``REFERENCE_RUNS`` reproduces the published model family (stage-1 depth
generators dd1..dd10 and super-resolvers sr1..sr131) together with each
run's reported parameter count, which the architecture audit checks
against actual builds.  ``DESK_RUNS`` are small CPU-friendly analogues
used by the end-to-end tests.

Super-resolution networks operate at their output resolution (the
condition is upsampled to it), so ``input_resolution`` there is the
target grid, not the low-res source.
"""

from __future__ import annotations

from dataclasses import dataclass

from depthdiff.backbone import ModelConfig

CONDITION_CHANNELS = {"rgb": 3, "depth": 1, "rgbd": 4}


@dataclass(frozen=True)
class RunPreset:
    model: ModelConfig
    diffusion_steps: int
    condition: str  # key into CONDITION_CHANNELS
    loss_weighting: str  # "simple" | "p2"
    lr: float
    lr_schedule: bool
    batch_size: int
    augment_depth_noise: bool = False
    augment_rgb_blur: bool = False
    reported_params: int | None = None
    # resolution the condition is read at before any upsampling; None means
    # the diffusion grid itself for RGB-conditioned (stage 1) runs and the
    # published 64-pixel source for super-resolution rows
    cond_resolution: int | None = None

    def __post_init__(self) -> None:
        if self.condition not in CONDITION_CHANNELS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if CONDITION_CHANNELS[self.condition] != self.model.cond_channels:
            raise ValueError(
                f"condition {self.condition!r} implies {CONDITION_CHANNELS[self.condition]} "
                f"channels, model expects {self.model.cond_channels}"
            )

    @property
    def effective_cond_resolution(self) -> int:
        if self.cond_resolution is not None:
            return self.cond_resolution
        return self.model.input_resolution if self.condition == "rgb" else 64


def _dd(arch, resblocks, sd, variance, weighting, lr, sched, batch, params):
    """Stage-1 row: 64x64 RGB-conditioned depth generator, T=600."""
    return RunPreset(
        model=ModelConfig(
            arch=arch,
            base_dim=64,
            dim_mults=(1, 2, 4, 8),
            n_resblocks=resblocks,
            stochastic_depth=sd,
            attention_resolutions=(64, 32, 16, 8),
            dropout=0.1,
            variance_mode=variance,
            in_channels=1,
            cond_channels=3,
            input_resolution=64,
        ),
        diffusion_steps=600,
        condition="rgb",
        loss_weighting=weighting,
        lr=lr,
        lr_schedule=sched,
        batch_size=batch,
        reported_params=params,
    )


def _sr(
    arch,
    base,
    mults,
    resblocks,
    sd,
    att,
    resolution,
    condition,
    steps,
    variance,
    weighting,
    lr,
    batch,
    params,
    noise=False,
    blur=False,
):
    return RunPreset(
        model=ModelConfig(
            arch=arch,
            base_dim=base,
            dim_mults=mults,
            n_resblocks=resblocks,
            stochastic_depth=sd,
            attention_resolutions=att,
            dropout=0.1,
            variance_mode=variance,
            in_channels=1,
            cond_channels=CONDITION_CHANNELS[condition],
            input_resolution=resolution,
        ),
        diffusion_steps=steps,
        condition=condition,
        loss_weighting=weighting,
        lr=lr,
        lr_schedule=True,
        batch_size=batch,
        augment_depth_noise=noise,
        augment_rgb_blur=blur,
        reported_params=params,
    )


_RB2 = (2, 2, 2, 2)
_RB9 = (2, 2, 12, 2)
_SD10 = (0.1, 0.1, 0.5, 0.1)
_M = 1_000_000

# First super-resolver family: five stages with a heavy penultimate level.
_SR1 = dict(mults=(1, 2, 4, 4, 8), resblocks=(2, 2, 2, 12, 2), sd=(0.1, 0.1, 0.1, 0.5, 0.1))
# Second family: wider base, uniform shallow stages, no stochastic depth.
_SR2 = dict(mults=(1, 1, 2, 2, 4), resblocks=(3, 3, 3, 3, 3), sd=None)

REFERENCE_RUNS = {
    "dd1": _dd("unet", _RB2, None, "fixed", "simple", 4e-5, False, 128, 41 * _M),
    "dd2": _dd("unet3plus", _RB2, None, "fixed", "simple", 4e-5, False, 128, 42 * _M),
    "dd3": _dd("unet3plus", _RB2, None, "learned", "simple", 4e-5, False, 128, 42 * _M),
    "dd4": _dd("unet3plus", _RB2, None, "learned", "p2", 4e-5, False, 128, 42 * _M),
    "dd5": _dd("unet3plus", _RB2, None, "learned", "p2", 6e-5, True, 64, 42 * _M),
    "dd6": _dd("unet", _RB2, None, "learned", "p2", 4e-5, True, 24, 41 * _M),
    "dd7": _dd("unet", _RB2, None, "learned", "simple", 4e-5, True, 24, 41 * _M),
    "dd8": _dd("unet3plus", _RB2, None, "learned", "simple", 4e-5, True, 12, 42 * _M),
    "dd9": _dd("unet3plus", _RB9, None, "learned", "simple", 4e-5, True, 12, 55 * _M),
    "dd10": _dd("unet3plus", _RB9, _SD10, "learned", "simple", 4e-5, True, 12, 55 * _M),
    "sr1": _sr("unet3plus", 96, **_SR1, att=(32, 16, 8), resolution=128, condition="rgbd",
               steps=1000, variance="learned", weighting="p2", lr=1.5e-5, batch=8,
               params=153 * _M),
    "sr2": _sr("unet3plus", 64, **_SR1, att=(32, 16, 8), resolution=128, condition="depth",
               steps=1000, variance="learned", weighting="p2", lr=1e-5, batch=16,
               params=69 * _M),
    "sr3": _sr("unet3plus", 64, **_SR1, att=(32, 16, 8), resolution=128, condition="rgbd",
               steps=1000, variance="learned", weighting="p2", lr=1e-5, batch=16,
               params=69 * _M),
    "sr4": _sr("unet3plus", 64, **_SR1, att=(32, 16, 8), resolution=128, condition="depth",
               steps=600, variance="learned", weighting="p2", lr=1e-5, batch=16,
               params=69 * _M),
    "sr5": _sr("unet3plus", 64, **_SR1, att=(32, 16, 8), resolution=128, condition="rgbd",
               steps=600, variance="learned", weighting="p2", lr=1e-5, batch=16,
               params=69 * _M),
    "sr6": _sr("unet", 128, **_SR2, att=(32, 16, 8), resolution=128, condition="rgbd",
               steps=1000, variance="fixed", weighting="simple", lr=5e-5, batch=16,
               params=72 * _M),
    "sr7": _sr("unet", 128, **_SR2, att=(32, 16, 8), resolution=128, condition="depth",
               steps=1000, variance="fixed", weighting="simple", lr=5e-5, batch=16,
               params=72 * _M),
    "sr8": _sr("unet", 128, **_SR2, att=(32, 16, 8), resolution=128, condition="rgbd",
               steps=600, variance="fixed", weighting="simple", lr=5e-5, batch=16,
               params=72 * _M),
    "sr9": _sr("unet", 128, **_SR2, att=(32, 16, 8), resolution=128, condition="depth",
               steps=600, variance="fixed", weighting="simple", lr=5e-5, batch=16,
               params=72 * _M),
    "sr10": _sr("unet", 192, **_SR2, att=(32, 16, 8), resolution=128, condition="rgbd",
                steps=1000, variance="fixed", weighting="simple", lr=1e-4, batch=8,
                params=161 * _M),
    "sr11": _sr("unet", 192, **_SR2, att=(32, 16, 8), resolution=128, condition="depth",
                steps=1000, variance="fixed", weighting="simple", lr=1e-4, batch=8,
                params=161 * _M),
    "sr61": _sr("unet", 128, **_SR2, att=(32, 16, 8), resolution=128, condition="rgbd",
                steps=1000, variance="fixed", weighting="simple", lr=5e-5, batch=16,
                params=72 * _M, blur=True),
    "sr62": _sr("unet", 128, **_SR2, att=(32, 16, 8), resolution=128, condition="rgbd",
                steps=1000, variance="fixed", weighting="simple", lr=5e-5, batch=16,
                params=72 * _M, noise=True),
    "sr63": _sr("unet", 128, **_SR2, att=(32, 16, 8), resolution=128, condition="rgbd",
                steps=1000, variance="fixed", weighting="simple", lr=5e-5, batch=16,
                params=72 * _M, noise=True, blur=True),
    "sr12": _sr("unet", 128, **_SR2, att=(32, 16), resolution=256, condition="rgbd",
                steps=1000, variance="fixed", weighting="simple", lr=3e-5, batch=4,
                params=72 * _M, noise=True),
    "sr121": _sr("unet", 128, **_SR2, att=(64, 32, 16), resolution=256, condition="rgbd",
                 steps=1000, variance="fixed", weighting="simple", lr=3e-5, batch=4,
                 params=72 * _M, noise=True),
    "sr122": _sr("unet", 128, mults=(1, 1, 2, 2, 4, 4), resblocks=(3, 3, 3, 3, 3, 3),
                 sd=None, att=(32, 16, 8), resolution=256, condition="rgbd",
                 steps=1000, variance="fixed", weighting="simple", lr=3e-5, batch=4,
                 params=131 * _M, noise=True),
    "sr13": _sr("unet", 192, **_SR2, att=(32, 16), resolution=256, condition="rgbd",
                steps=1000, variance="fixed", weighting="simple", lr=5e-5, batch=2,
                params=161 * _M, noise=True),
    "sr131": _sr("unet", 192, **_SR2, att=(64, 32, 16), resolution=256, condition="rgbd",
                 steps=1000, variance="fixed", weighting="simple", lr=5e-5, batch=2,
                 params=161 * _M, noise=True),
}

# CPU-scale analogues: same two-stage structure, tiny widths and schedules.
DESK_RUNS = {
    "desk-stage1": RunPreset(
        model=ModelConfig(
            arch="unet3plus",
            base_dim=32,
            dim_mults=(1, 2, 4),
            n_resblocks=(1, 1, 1),
            attention_resolutions=(8,),
            dropout=0.0,
            variance_mode="learned",
            in_channels=1,
            cond_channels=3,
            input_resolution=32,
        ),
        diffusion_steps=50,
        condition="rgb",
        loss_weighting="simple",
        lr=2e-4,
        lr_schedule=True,
        batch_size=8,
    ),
    "desk-stage2": RunPreset(
        model=ModelConfig(
            arch="unet",
            base_dim=32,
            dim_mults=(1, 1, 2),
            n_resblocks=(1, 1, 1),
            attention_resolutions=(16,),
            dropout=0.0,
            variance_mode="fixed",
            in_channels=1,
            cond_channels=4,
            input_resolution=64,
        ),
        diffusion_steps=50,
        condition="rgbd",
        # Same weighting as every published super-resolution run: with the
        # plain loss the low-SNR timesteps train so slowly that the sampler's
        # first few steps inject garbage the rest of the chain then amplifies.
        loss_weighting="p2",
        lr=2e-4,
        lr_schedule=True,
        batch_size=4,
        cond_resolution=32,
    ),
}
