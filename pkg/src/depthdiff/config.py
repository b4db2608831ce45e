"""Typed run configuration and its flat on-disk format.

A config file is INI-style text with one section per concern and only
scalar values, so it stays diffable and hashable:

    [run]        stage, diffusion_steps, schedule, loss, lambda_vlb, p2_k,
                 p2_gamma, epochs, batch_size, seed, dataset_root,
                 cond_resolution, out_resolution, checkpoint_every,
                 eval_every
    [model]      arch, base_dim, dim_mults, n_resblocks, stochastic_depth,
                 attention_resolutions, attention_heads, attention_head_dim,
                 groupnorm_groups, groupnorm_eps, dropout, variance_mode,
                 in_channels, cond_channels, input_resolution
    [optimizer]  learning_rate, beta1, beta2, lr_schedule, warmup_steps,
                 cycle_length
    [augment]    blur_prob, blur_sigma_max, depth_noise_sigma_max, scale_lo,
                 scale_hi, shift_range, seed

Integer tuples are comma-separated; ``stochastic_depth = none`` selects the
all-zero default.  ``to_text`` is canonical (fixed key order), so equal
configs serialize to identical bytes and the checkpoint hash is stable.

The ``loss`` field names the training objective: ``simple`` and ``p2`` are
the two noise-prediction weightings, and ``hybrid`` is the simple weighting
plus the variational term that trains a learned-variance head.  A learned
variance head always adds that term, so ``simple`` with a learned head is
rejected in favor of the explicit ``hybrid`` spelling, while ``p2`` combines
with either variance mode.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .backbone import ModelConfig
from .presets import CONDITION_CHANNELS, DESK_RUNS, REFERENCE_RUNS, RunPreset

STAGES = ("depth_diffusion", "super_resolution")
SCHEDULES = ("cosine", "linear")
LOSSES = ("simple", "p2", "hybrid")
LR_SCHEDULES = ("none", "cosine_restart_warmup")


@dataclass(frozen=True)
class RunConfig:
    stage: str
    model: ModelConfig
    diffusion_steps: int
    dataset_root: str
    cond_resolution: int
    out_resolution: int
    schedule: str = "cosine"
    loss: str = "simple"
    lambda_vlb: float = 1e-3
    p2_k: float = 1.0
    p2_gamma: float = 1.0
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 500
    eval_every: int = 0
    learning_rate: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    lr_schedule: str = "none"
    warmup_steps: int = 100
    cycle_length: int = 1000
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.diffusion_steps < 1:
            raise ValueError("diffusion_steps must be >= 1")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("optimizer betas must lie in (0, 1)")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        for name in ("epochs", "batch_size", "checkpoint_every", "cycle_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup_steps < 0 or self.eval_every < 0:
            raise ValueError("warmup_steps and eval_every must be >= 0")
        if self.model.input_resolution != self.out_resolution:
            raise ValueError(
                f"model operates on {self.model.input_resolution} pixels but "
                f"out_resolution is {self.out_resolution}"
            )
        if self.stage == "depth_diffusion":
            if self.cond_resolution != self.out_resolution:
                raise ValueError(
                    "depth_diffusion generates on the condition grid: "
                    f"cond {self.cond_resolution} != out {self.out_resolution}"
                )
            if self.model.cond_channels != 3:
                raise ValueError("depth_diffusion conditions on RGB (3 channels)")
        else:
            if self.out_resolution <= self.cond_resolution:
                raise ValueError("super_resolution must increase the resolution")
            if self.out_resolution % self.cond_resolution != 0:
                raise ValueError(
                    f"out_resolution {self.out_resolution} must be a multiple of "
                    f"cond_resolution {self.cond_resolution}"
                )
            if self.model.cond_channels not in (1, 4):
                raise ValueError(
                    "super_resolution conditions on depth (1) or RGB-D (4) channels"
                )
        if self.loss == "hybrid" and self.model.variance_mode != "learned":
            raise ValueError("hybrid loss requires a learned-variance model")
        if self.loss == "simple" and self.model.variance_mode == "learned":
            raise ValueError(
                "a learned-variance head trains through the bound: spell this "
                "loss 'hybrid' (or 'p2')"
            )

    @property
    def weighting(self) -> str:
        """Noise-prediction weighting handed to the diffusion loss."""
        return "p2" if self.loss == "p2" else "simple"


# ------------------------------------------------------------- serialization


def _tuple_str(values) -> str:
    return ",".join(str(v) for v in values)


def _parse_tuple(text: str, cast):
    return tuple(cast(tok) for tok in text.split(","))


def to_text(cfg: RunConfig) -> str:
    """Canonical flat rendering; equal configs yield identical text."""
    model = cfg.model
    sections: dict[str, dict[str, str]] = {
        "run": {
            "stage": cfg.stage,
            "diffusion_steps": str(cfg.diffusion_steps),
            "schedule": cfg.schedule,
            "loss": cfg.loss,
            "lambda_vlb": repr(cfg.lambda_vlb),
            "p2_k": repr(cfg.p2_k),
            "p2_gamma": repr(cfg.p2_gamma),
            "epochs": str(cfg.epochs),
            "batch_size": str(cfg.batch_size),
            "seed": str(cfg.seed),
            "dataset_root": cfg.dataset_root,
            "cond_resolution": str(cfg.cond_resolution),
            "out_resolution": str(cfg.out_resolution),
            "checkpoint_every": str(cfg.checkpoint_every),
            "eval_every": str(cfg.eval_every),
        },
        "model": {
            "arch": model.arch,
            "base_dim": str(model.base_dim),
            "dim_mults": _tuple_str(model.dim_mults),
            "n_resblocks": _tuple_str(model.n_resblocks),
            "stochastic_depth": (
                "none"
                if not any(model.stochastic_depth)
                else _tuple_str(model.stochastic_depth)
            ),
            "attention_resolutions": _tuple_str(model.attention_resolutions),
            "attention_heads": str(model.attention_heads),
            "attention_head_dim": str(model.attention_head_dim),
            "groupnorm_groups": str(model.groupnorm_groups),
            "groupnorm_eps": repr(model.groupnorm_eps),
            "dropout": repr(model.dropout),
            "variance_mode": model.variance_mode,
            "in_channels": str(model.in_channels),
            "cond_channels": str(model.cond_channels),
            "input_resolution": str(model.input_resolution),
        },
        "optimizer": {
            "learning_rate": repr(cfg.learning_rate),
            "beta1": repr(cfg.beta1),
            "beta2": repr(cfg.beta2),
            "lr_schedule": cfg.lr_schedule,
            "warmup_steps": str(cfg.warmup_steps),
            "cycle_length": str(cfg.cycle_length),
        },
        "augment": {
            "blur_prob": repr(cfg.augment.blur_prob),
            "blur_sigma_max": repr(cfg.augment.blur_sigma_max),
            "depth_noise_sigma_max": repr(cfg.augment.depth_noise_sigma_max),
            "scale_lo": repr(cfg.augment.scale_range[0]),
            "scale_hi": repr(cfg.augment.scale_range[1]),
            "shift_range": str(cfg.augment.shift_range),
            "seed": str(cfg.augment.seed),
        },
    }
    out = io.StringIO()
    for section, keys in sections.items():
        out.write(f"[{section}]\n")
        for key, value in keys.items():
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()


_EXPECTED_KEYS = {
    "run": {
        "stage", "diffusion_steps", "schedule", "loss", "lambda_vlb", "p2_k",
        "p2_gamma", "epochs", "batch_size", "seed", "dataset_root",
        "cond_resolution", "out_resolution", "checkpoint_every", "eval_every",
    },
    "model": {
        "arch", "base_dim", "dim_mults", "n_resblocks", "stochastic_depth",
        "attention_resolutions", "attention_heads", "attention_head_dim",
        "groupnorm_groups", "groupnorm_eps", "dropout", "variance_mode",
        "in_channels", "cond_channels", "input_resolution",
    },
    "optimizer": {
        "learning_rate", "beta1", "beta2", "lr_schedule", "warmup_steps",
        "cycle_length",
    },
    "augment": {
        "blur_prob", "blur_sigma_max", "depth_noise_sigma_max", "scale_lo",
        "scale_hi", "shift_range", "seed",
    },
}


def parse_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"unparseable config: {exc}") from None
    for section, expected in _EXPECTED_KEYS.items():
        if not parser.has_section(section):
            raise ValueError(f"config is missing the [{section}] section")
        present = set(parser[section])
        unknown = present - expected
        missing = expected - present
        if unknown:
            raise ValueError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
        if missing:
            raise ValueError(f"missing key(s) in [{section}]: {sorted(missing)}")
    run, mdl, opt, aug = (
        parser["run"], parser["model"], parser["optimizer"], parser["augment"]
    )
    sd_text = mdl["stochastic_depth"]
    model = ModelConfig(
        arch=mdl["arch"],
        base_dim=mdl.getint("base_dim"),
        dim_mults=_parse_tuple(mdl["dim_mults"], int),
        n_resblocks=_parse_tuple(mdl["n_resblocks"], int),
        stochastic_depth=None if sd_text == "none" else _parse_tuple(sd_text, float),
        attention_resolutions=_parse_tuple(mdl["attention_resolutions"], int),
        attention_heads=mdl.getint("attention_heads"),
        attention_head_dim=mdl.getint("attention_head_dim"),
        groupnorm_groups=mdl.getint("groupnorm_groups"),
        groupnorm_eps=mdl.getfloat("groupnorm_eps"),
        dropout=mdl.getfloat("dropout"),
        variance_mode=mdl["variance_mode"],
        in_channels=mdl.getint("in_channels"),
        cond_channels=mdl.getint("cond_channels"),
        input_resolution=mdl.getint("input_resolution"),
    )
    augment = AugmentConfig(
        blur_prob=aug.getfloat("blur_prob"),
        blur_sigma_max=aug.getfloat("blur_sigma_max"),
        depth_noise_sigma_max=aug.getfloat("depth_noise_sigma_max"),
        scale_range=(aug.getfloat("scale_lo"), aug.getfloat("scale_hi")),
        shift_range=aug.getint("shift_range"),
        seed=aug.getint("seed"),
    )
    return RunConfig(
        stage=run["stage"],
        model=model,
        diffusion_steps=run.getint("diffusion_steps"),
        dataset_root=run["dataset_root"],
        cond_resolution=run.getint("cond_resolution"),
        out_resolution=run.getint("out_resolution"),
        schedule=run["schedule"],
        loss=run["loss"],
        lambda_vlb=run.getfloat("lambda_vlb"),
        p2_k=run.getfloat("p2_k"),
        p2_gamma=run.getfloat("p2_gamma"),
        epochs=run.getint("epochs"),
        batch_size=run.getint("batch_size"),
        seed=run.getint("seed"),
        checkpoint_every=run.getint("checkpoint_every"),
        eval_every=run.getint("eval_every"),
        learning_rate=opt.getfloat("learning_rate"),
        beta1=opt.getfloat("beta1"),
        beta2=opt.getfloat("beta2"),
        lr_schedule=opt["lr_schedule"],
        warmup_steps=opt.getint("warmup_steps"),
        cycle_length=opt.getint("cycle_length"),
        augment=augment,
    )


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_text(cfg))


def read_config(path) -> RunConfig:
    return parse_text(Path(path).read_text())


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode()).hexdigest()


# ------------------------------------------------------------------ presets


def from_preset(
    name: str,
    dataset_root: str,
    epochs: int = 1,
    seed: int = 0,
    **overrides,
) -> RunConfig:
    """Instantiate a named preset as a trainable configuration.

    The preset fixes the architecture and the published hyperparameters;
    the caller supplies the run-specific dataset, duration, and seed, and
    may override any other RunConfig field by keyword.
    """
    preset: RunPreset | None = DESK_RUNS.get(name) or REFERENCE_RUNS.get(name)
    if preset is None:
        raise KeyError(f"unknown preset {name!r}")
    if preset.loss_weighting == "p2":
        loss = "p2"
    elif preset.model.variance_mode == "learned":
        loss = "hybrid"
    else:
        loss = "simple"
    augment = AugmentConfig(
        blur_prob=0.5 if preset.augment_rgb_blur else 0.0,
        blur_sigma_max=0.6,
        depth_noise_sigma_max=0.06 if preset.augment_depth_noise else 0.0,
        scale_range=(1.0, 1.0),
        shift_range=0,
        seed=seed,
    )
    values = dict(
        stage="depth_diffusion" if preset.condition == "rgb" else "super_resolution",
        model=preset.model,
        diffusion_steps=preset.diffusion_steps,
        dataset_root=dataset_root,
        cond_resolution=preset.effective_cond_resolution,
        out_resolution=preset.model.input_resolution,
        loss=loss,
        epochs=epochs,
        batch_size=preset.batch_size,
        seed=seed,
        learning_rate=preset.lr,
        lr_schedule="cosine_restart_warmup" if preset.lr_schedule else "none",
        augment=augment,
    )
    values.update(overrides)
    return RunConfig(**values)
