"""Conditional denoiser backbones.

Two architectures share one encoder recipe.  The plain UNet decoder
concatenates each stage with the same-resolution encoder feature; the
UNet3+ decoder aggregates full-scale skips from every encoder at the same
or higher resolution and every decoder output below, resampling each
source to the stage's grid before concatenation.

Building blocks: GroupNorm/GeLU residual blocks with the timestep
embedding injected as a per-block scale and shift, residual resampling
blocks for all up/down transitions, softmax attention at the coarsest
attention scale (and in the middle block), linear attention at finer
scales, and bias-free convolutions throughout.

Networks operate on batched NCHW tensors; :func:`forward` adapts a
single channel-last ``DiffusionState`` to that layout and back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from depthdiff.diffusion import DenoiserOutput, DiffusionState


@dataclass(frozen=True)
class ModelConfig:
    """Complete structural description of one denoiser network."""

    arch: str = "unet"
    base_dim: int = 64
    dim_mults: tuple[int, ...] = (1, 2, 4, 8)
    n_resblocks: tuple[int, ...] = (2, 2, 2, 2)
    stochastic_depth: Optional[tuple[float, ...]] = None
    attention_resolutions: tuple[int, ...] = (8,)
    attention_heads: int = 8
    attention_head_dim: int = 32
    groupnorm_groups: int = 8
    groupnorm_eps: float = 1e-5
    dropout: float = 0.0
    variance_mode: str = "fixed"
    in_channels: int = 1
    cond_channels: int = 3
    out_channels: Optional[int] = None
    input_resolution: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "dim_mults", tuple(self.dim_mults))
        object.__setattr__(self, "n_resblocks", tuple(self.n_resblocks))
        object.__setattr__(self, "attention_resolutions", tuple(self.attention_resolutions))
        if self.stochastic_depth is None:
            object.__setattr__(self, "stochastic_depth", (0.0,) * len(self.dim_mults))
        else:
            object.__setattr__(self, "stochastic_depth", tuple(self.stochastic_depth))
        if self.arch not in ("unet", "unet3plus"):
            raise ValueError(f"arch must be 'unet' or 'unet3plus', got {self.arch!r}")
        if self.variance_mode not in ("fixed", "learned"):
            raise ValueError(f"variance_mode must be 'fixed' or 'learned', got {self.variance_mode!r}")
        n = len(self.dim_mults)
        if n < 2:
            raise ValueError("need at least two stages")
        if len(self.n_resblocks) != n or len(self.stochastic_depth) != n:
            raise ValueError(
                "dim_mults, n_resblocks and stochastic_depth must have equal length: "
                f"{n} vs {len(self.n_resblocks)} vs {len(self.stochastic_depth)}"
            )
        if self.base_dim <= 0 or self.base_dim % 2:
            raise ValueError(f"base_dim must be positive and even, got {self.base_dim}")
        if self.base_dim % self.groupnorm_groups:
            raise ValueError(
                f"base_dim {self.base_dim} not divisible by groupnorm_groups {self.groupnorm_groups}"
            )
        if self.input_resolution % 2 ** (n - 1):
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by 2^{n - 1}"
            )
        res = set(self.stage_resolutions())
        bad = [r for r in self.attention_resolutions if r not in res]
        if bad:
            raise ValueError(
                f"attention_resolutions {bad} are not stage resolutions {sorted(res, reverse=True)}"
            )
        if any(not 0.0 <= p < 1.0 for p in self.stochastic_depth):
            raise ValueError("stochastic_depth probabilities must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if any(m <= 0 for m in self.dim_mults) or any(k < 0 for k in self.n_resblocks):
            raise ValueError("dim_mults must be positive and n_resblocks non-negative")
        if self.in_channels <= 0 or self.cond_channels < 0:
            raise ValueError("in_channels must be positive and cond_channels non-negative")
        expected_out = self.in_channels if self.variance_mode == "fixed" else 2 * self.in_channels
        if self.out_channels is None:
            object.__setattr__(self, "out_channels", expected_out)
        elif self.out_channels != expected_out:
            raise ValueError(
                f"out_channels must be {expected_out} for variance_mode={self.variance_mode!r}, "
                f"got {self.out_channels}"
            )

    def stage_resolutions(self) -> tuple[int, ...]:
        """Spatial size of each stage, halving from ``input_resolution``."""
        return tuple(self.input_resolution // 2**i for i in range(len(self.dim_mults)))

    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_dim * m for m in self.dim_mults)


class SinusoidalTimeEmbedding(nn.Module):
    """Table-free sinusoidal embedding of an integer timestep."""

    def __init__(self, dim: int):
        super().__init__()
        if dim < 2 or dim % 2:
            raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
        )
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _damp_init_(conv: nn.Conv2d, factor: float = 1e-3) -> nn.Conv2d:
    """Shrink a conv's initial weights so the layer starts near (but not at)
    zero.  Residual branches and output projections initialized this way make
    a deep stack begin close to the identity map, which keeps early training
    stable at any depth."""
    with torch.no_grad():
        conv.weight.mul_(factor)
    return conv


def residual_combine(
    skip: torch.Tensor, branch: torch.Tensor, drop_prob: float, training: bool
) -> torch.Tensor:
    """Stochastic-depth combine of a residual branch with its skip path.

    In training the branch is dropped whole with probability ``drop_prob``
    and scaled by 1/(1-p) when kept, so the eval-time sum ``skip + branch``
    equals the expectation over drop draws.
    """
    if training and drop_prob > 0.0:
        if torch.rand(()).item() < drop_prob:
            return skip
        return skip + branch / (1.0 - drop_prob)
    return skip + branch


class AdaGNResBlock(nn.Module):
    """Two-conv residual block with timestep scale/shift after the second norm.

    ``resample`` turns the block into a residual down- ("down", average
    pooling) or upsampling ("up", nearest-neighbour) block: both the main
    branch and the skip path are resampled, keeping the block residual.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        emb_dim: int,
        *,
        groups: int,
        eps: float,
        dropout: float = 0.0,
        drop_prob: float = 0.0,
        resample: Optional[str] = None,
    ):
        super().__init__()
        if resample not in (None, "down", "up"):
            raise ValueError(f"resample must be None, 'down' or 'up', got {resample!r}")
        self.norm1 = nn.GroupNorm(groups, c_in, eps=eps)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.emb_proj = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(groups, c_out, eps=eps)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = _damp_init_(nn.Conv2d(c_out, c_out, 3, padding=1, bias=False))
        self.skip = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else nn.Identity()
        self.drop_prob = drop_prob
        self.resample = resample

    def _resample(self, h: torch.Tensor) -> torch.Tensor:
        if self.resample == "down":
            return F.avg_pool2d(h, 2)
        if self.resample == "up":
            return F.interpolate(h, scale_factor=2, mode="nearest")
        return h

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.norm1(x))
        h = self.conv1(self._resample(h))
        scale, shift = self.emb_proj(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(self.dropout(F.gelu(h)))
        x = self.skip(self._resample(x))
        return residual_combine(x, h, self.drop_prob, self.training)


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis of an NCHW tensor."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, 1, 1))
        self.bias = nn.Parameter(torch.zeros(dim, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class SelfAttention2d(nn.Module):
    """Residual softmax self-attention over all spatial positions."""

    def __init__(self, dim: int, heads: int, head_dim: int, eps: float = 1e-5):
        super().__init__()
        hidden = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.norm = ChannelLayerNorm(dim, eps)
        self.qkv = nn.Conv2d(dim, 3 * hidden, 1, bias=False)
        self.proj = _damp_init_(nn.Conv2d(hidden, dim, 1, bias=False))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        q, k, v = (
            self.qkv(self.norm(x))
            .reshape(b, 3, self.heads, self.head_dim, h * w)
            .transpose(-2, -1)
            .unbind(1)
        )
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(-2, -1).reshape(b, self.heads * self.head_dim, h, w)
        return x + self.proj(out)


class LinearSelfAttention2d(nn.Module):
    """Residual linear-time attention.

    Queries are softmax-normalized along the feature axis and keys along
    the position axis; values are contracted through the resulting
    head_dim x head_dim context matrix, so cost is linear in positions.
    """

    def __init__(self, dim: int, heads: int, head_dim: int, eps: float = 1e-5):
        super().__init__()
        hidden = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.norm = ChannelLayerNorm(dim, eps)
        self.qkv = nn.Conv2d(dim, 3 * hidden, 1, bias=False)
        self.proj = _damp_init_(nn.Conv2d(hidden, dim, 1, bias=False))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, self.head_dim, h * w).unbind(1)
        q = q.softmax(dim=-2) * self.head_dim**-0.5
        k = k.softmax(dim=-1)
        context = k @ v.transpose(-2, -1)
        out = (context.transpose(-2, -1) @ q).reshape(b, self.heads * self.head_dim, h, w)
        return x + self.proj(out)


class _Stage(nn.Module):
    """A run of residual blocks followed by at most one attention unit."""

    def __init__(self, blocks: Sequence[nn.Module], attn: Optional[nn.Module] = None):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.attn = attn

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            h = block(h, emb)
        if self.attn is not None:
            h = self.attn(h)
        return h


def _resize_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour when shrinking, bilinear when enlarging."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if x.shape[-1] > size[-1]:
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class _FusionStage(nn.Module):
    """UNet3+ decoder stage: project and concatenate full-scale sources.

    Sources for decoder stage j are the encoder outputs 0..j (same or
    higher resolution, shrunk as needed) and the decoder outputs below
    (middle block included, enlarged as needed), each passed through a
    3x3 projection to a common width before concatenation.
    """

    def __init__(
        self,
        stage: int,
        widths: Sequence[int],
        skip_width: int,
        blocks: Sequence[nn.Module],
        attn: Optional[nn.Module],
    ):
        super().__init__()
        n = len(widths)
        self.stage = stage
        self.source_specs = [("enc", k) for k in range(stage + 1)] + [
            ("dec", m) for m in range(n - 1, stage, -1)
        ]
        self.projs = nn.ModuleList(
            nn.Conv2d(widths[k], skip_width, 3, padding=1, bias=False)
            for _, k in self.source_specs
        )
        self.blocks = nn.ModuleList(blocks)
        self.attn = attn

    def forward(
        self,
        enc_feats: Sequence[torch.Tensor],
        dec_feats: dict[int, torch.Tensor],
        emb: torch.Tensor,
    ) -> torch.Tensor:
        size = tuple(enc_feats[self.stage].shape[-2:])
        gathered = []
        for (kind, idx), proj in zip(self.source_specs, self.projs):
            src = enc_feats[idx] if kind == "enc" else dec_feats[idx]
            gathered.append(proj(_resize_to(src, size)))
        h = torch.cat(gathered, dim=1)
        for block in self.blocks:
            h = block(h, emb)
        if self.attn is not None:
            h = self.attn(h)
        return h


# Decoder stages of the UNet3+ variant use a fixed short run of blocks;
# per-stage n_resblocks shapes the encoder only.
FUSION_DECODER_BLOCKS = 3


class DenoiserNet(nn.Module):
    """Time-conditioned encoder/decoder denoiser over noisy input + condition."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = len(cfg.dim_mults)
        widths = cfg.stage_widths()
        resolutions = cfg.stage_resolutions()
        emb_dim = 4 * cfg.base_dim

        self.time_mlp = nn.Sequential(
            SinusoidalTimeEmbedding(cfg.base_dim),
            nn.Linear(cfg.base_dim, emb_dim),
            nn.GELU(),
            nn.Linear(emb_dim, emb_dim),
        )
        self.stem = nn.Conv2d(
            cfg.in_channels + cfg.cond_channels, widths[0], 3, padding=1, bias=False
        )

        def block(c_in, c_out, stage, resample=None):
            return AdaGNResBlock(
                c_in,
                c_out,
                emb_dim,
                groups=cfg.groupnorm_groups,
                eps=cfg.groupnorm_eps,
                dropout=cfg.dropout,
                drop_prob=cfg.stochastic_depth[stage],
                resample=resample,
            )

        def attention(stage):
            if resolutions[stage] not in cfg.attention_resolutions:
                return None
            cls = (
                SelfAttention2d
                if resolutions[stage] == min(cfg.attention_resolutions)
                else LinearSelfAttention2d
            )
            return cls(widths[stage], cfg.attention_heads, cfg.attention_head_dim)

        self.enc_stages = nn.ModuleList(
            _Stage([block(widths[i], widths[i], i) for _ in range(cfg.n_resblocks[i])], attention(i))
            for i in range(n)
        )
        self.downs = nn.ModuleList(
            block(widths[i], widths[i + 1], i, resample="down") for i in range(n - 1)
        )

        self.mid_block1 = block(widths[-1], widths[-1], n - 1)
        self.mid_attn = SelfAttention2d(widths[-1], cfg.attention_heads, cfg.attention_head_dim)
        self.mid_block2 = block(widths[-1], widths[-1], n - 1)

        if cfg.arch == "unet":
            self.ups = nn.ModuleList(
                block(widths[i + 1], widths[i], i, resample="up") for i in range(n - 1)
            )
            self.dec_stages = nn.ModuleList(
                _Stage(
                    [block(2 * widths[i], widths[i], i)]
                    + [block(widths[i], widths[i], i) for _ in range(cfg.n_resblocks[i])],
                    attention(i),
                )
                for i in range(n - 1)
            )
        else:
            skip_width = 2 * cfg.base_dim
            self.dec_stages = nn.ModuleList(
                _FusionStage(
                    j,
                    widths,
                    skip_width,
                    [block(len(widths) * skip_width, widths[j], j)]
                    + [block(widths[j], widths[j], j) for _ in range(FUSION_DECODER_BLOCKS - 1)],
                    attention(j),
                )
                for j in range(n - 1)
            )

        self.out_norm = nn.GroupNorm(cfg.groupnorm_groups, widths[0], eps=cfg.groupnorm_eps)
        self.out_conv = _damp_init_(nn.Conv2d(widths[0], cfg.out_channels, 3, padding=1, bias=False))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        total = cfg.in_channels + cfg.cond_channels
        if x.ndim != 4 or x.shape[1] != total:
            raise ValueError(f"expected input of shape [B, {total}, H, W], got {tuple(x.shape)}")
        stride = 2 ** (len(cfg.dim_mults) - 1)
        if x.shape[-2] % stride or x.shape[-1] % stride:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {stride}")

        emb = self.time_mlp(t)
        h = self.stem(x)
        enc_feats = []
        for i, stage in enumerate(self.enc_stages):
            h = stage(h, emb)
            enc_feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h, emb)

        h = self.mid_block1(h, emb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, emb)

        if cfg.arch == "unet":
            for i in reversed(range(len(self.dec_stages))):
                h = self.ups[i](h, emb)
                h = torch.cat([h, enc_feats[i]], dim=1)
                h = self.dec_stages[i](h, emb)
        else:
            dec_feats = {len(cfg.dim_mults) - 1: h}
            for j in reversed(range(len(self.dec_stages))):
                h = self.dec_stages[j](enc_feats, dec_feats, emb)
                dec_feats[j] = h

        return self.out_conv(F.gelu(self.out_norm(h)))


def build_denoiser(cfg: ModelConfig) -> DenoiserNet:
    """Construct the configured network (weights randomly initialized)."""
    return DenoiserNet(cfg)


def forward(
    denoiser: DenoiserNet,
    state: DiffusionState,
    train_mode: bool = False,
    rng_seed: int = 0,
) -> DenoiserOutput:
    """Run one channel-last sample through the network.

    ``train_mode`` enables dropout and stochastic depth, both drawn from
    ``rng_seed`` so a training step is replayable; eval mode is
    deterministic.  Gradient tracking is left to the caller.
    """
    cfg = denoiser.cfg
    if state.x_t.ndim != 3 or state.x_t.shape[-1] != cfg.in_channels:
        raise ValueError(
            f"x_t must be [H, W, {cfg.in_channels}], got {tuple(state.x_t.shape)}"
        )
    if cfg.cond_channels == 0:
        if state.condition is not None:
            raise ValueError("network takes no condition input")
        x = state.x_t.movedim(-1, 0)[None]
    else:
        if state.condition is None or state.condition.shape[-1] != cfg.cond_channels:
            raise ValueError(f"condition must be [H, W, {cfg.cond_channels}]")
        x = torch.cat(
            [state.x_t.movedim(-1, 0), state.condition.movedim(-1, 0)], dim=0
        )[None]
    t = torch.tensor([state.t], device=x.device)

    denoiser.train(train_mode)
    if train_mode:
        with torch.random.fork_rng():
            torch.manual_seed(rng_seed)
            raw = denoiser(x, t)
    else:
        raw = denoiser(x, t)

    if cfg.variance_mode == "learned":
        eps_raw, v_raw = raw.chunk(2, dim=1)
        v = (torch.tanh(v_raw) + 1.0) / 2.0
        return DenoiserOutput(
            eps_pred=eps_raw[0].movedim(0, -1), v=v[0].movedim(0, -1)
        )
    return DenoiserOutput(eps_pred=raw[0].movedim(0, -1))


def as_denoiser(net: DenoiserNet):
    """Wrap a network as the eval-mode single-sample denoiser callable.

    Runs without gradient tracking so long sampling chains do not retain
    autograd graphs.
    """

    def denoise(state: DiffusionState) -> DenoiserOutput:
        with torch.no_grad():
            return forward(net, state, train_mode=False)

    return denoise


def upsample_condition_rgbd(rgbd: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Upsample an [h, w, 4] RGB-D raster: RGB bilinearly, depth nearest."""
    if rgbd.ndim != 3 or rgbd.shape[2] != 4:
        raise ValueError(f"expected [h, w, 4] input, got {rgbd.shape}")
    height, width = target
    if height < rgbd.shape[0] or width < rgbd.shape[1]:
        raise ValueError(f"target {target} smaller than source {rgbd.shape[:2]}")
    if (height, width) == rgbd.shape[:2]:
        return rgbd.copy()
    rgb = cv2.resize(rgbd[:, :, :3], (width, height), interpolation=cv2.INTER_LINEAR)
    depth = cv2.resize(rgbd[:, :, 3], (width, height), interpolation=cv2.INTER_NEAREST)
    return np.concatenate([rgb, depth[:, :, None]], axis=2)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def audit_skip_connectivity(net: DenoiserNet) -> list[int]:
    """Number of concatenated feature sources per decoder stage.

    Ordered from the highest-resolution decoder stage (index 0) downward.
    Plain UNet stages always merge exactly one encoder skip; UNet3+ stages
    report the length of their projection list.
    """
    counts = []
    for stage in net.dec_stages:
        if isinstance(stage, _FusionStage):
            counts.append(len(stage.projs))
        else:
            counts.append(1)
    return counts


def audit_bias_freedom(net: nn.Module) -> list[str]:
    """Names of convolution modules that carry a bias term (should be none)."""
    return [
        name
        for name, mod in net.named_modules()
        if isinstance(mod, (nn.Conv1d, nn.Conv2d, nn.Conv3d)) and mod.bias is not None
    ]
