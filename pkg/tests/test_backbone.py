import dataclasses

import numpy as np
import pytest
import torch

from depthdiff.backbone import (
    AdaGNResBlock,
    ModelConfig,
    SinusoidalTimeEmbedding,
    as_denoiser,
    audit_bias_freedom,
    audit_skip_connectivity,
    build_denoiser,
    count_parameters,
    forward,
    residual_combine,
    upsample_condition_rgbd,
)
from depthdiff.diffusion import DiffusionState
from depthdiff.presets import DESK_RUNS, REFERENCE_RUNS
from depthdiff.schedule import build_cosine_schedule
from depthdiff import diffusion

torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        arch="unet",
        base_dim=16,
        dim_mults=(1, 2, 4),
        n_resblocks=(1, 1, 1),
        attention_resolutions=(16, 8),
        variance_mode="fixed",
        in_channels=1,
        cond_channels=3,
        input_resolution=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_state(resolution=32, channels=1, cond_channels=3, t=7, seed=0) -> DiffusionState:
    g = torch.Generator().manual_seed(seed)
    cond = (
        torch.randn(resolution, resolution, cond_channels, generator=g)
        if cond_channels
        else None
    )
    return DiffusionState(
        x_t=torch.randn(resolution, resolution, channels, generator=g),
        t=t,
        condition=cond,
    )


# ---------------------------------------------------------------- ModelConfig


def test_config_derives_out_channels():
    assert tiny_config(variance_mode="fixed").out_channels == 1
    assert tiny_config(variance_mode="learned").out_channels == 2
    assert tiny_config(in_channels=3, cond_channels=0, variance_mode="learned").out_channels == 6


def test_config_rejects_out_channels_mismatch():
    with pytest.raises(ValueError, match="out_channels"):
        tiny_config(variance_mode="learned", out_channels=1)


def test_config_rejects_unknown_arch():
    with pytest.raises(ValueError, match="arch"):
        tiny_config(arch="vnet")


def test_config_rejects_stage_list_length_mismatch():
    with pytest.raises(ValueError, match="equal length"):
        tiny_config(n_resblocks=(1, 1))
    with pytest.raises(ValueError, match="equal length"):
        tiny_config(stochastic_depth=(0.1,))


def test_config_rejects_attention_off_the_stage_grid():
    # stages of a 32-input 3-stage net sit at 32/16/8; 4 is not one of them
    with pytest.raises(ValueError, match="attention_resolutions"):
        tiny_config(attention_resolutions=(4,))


def test_config_rejects_indivisible_resolution():
    with pytest.raises(ValueError, match="input_resolution"):
        tiny_config(input_resolution=30)


def test_config_rejects_bad_stochastic_depth():
    with pytest.raises(ValueError, match="stochastic_depth"):
        tiny_config(stochastic_depth=(0.0, 1.0, 0.0))


def test_stage_resolutions_and_widths():
    cfg = tiny_config()
    assert cfg.stage_resolutions() == (32, 16, 8)
    assert cfg.stage_widths() == (16, 32, 64)


def test_reference_and_desk_presets_all_validate():
    # construction of the tables already runs every ModelConfig.__post_init__
    assert len(REFERENCE_RUNS) == 29
    assert set(DESK_RUNS) == {"desk-stage1", "desk-stage2"}
    assert REFERENCE_RUNS["dd10"].model.arch == "unet3plus"
    assert REFERENCE_RUNS["sr121"].model.input_resolution == 256


# ------------------------------------------------------------- time embedding


def test_time_embedding_deterministic_and_injective():
    emb = SinusoidalTimeEmbedding(32)
    t = torch.arange(500)  # 10x a T=50 schedule
    a, b = emb(t), emb(t)
    assert torch.equal(a, b)
    dist = torch.cdist(a, a)
    dist.fill_diagonal_(float("inf"))
    assert float(dist.min()) > 1e-4


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ValueError):
        SinusoidalTimeEmbedding(15)


# ------------------------------------------------------------ forward passes


@pytest.mark.parametrize("arch", ["unet", "unet3plus"])
@pytest.mark.parametrize("variance_mode", ["fixed", "learned"])
def test_forward_shapes_and_variance_split(arch, variance_mode):
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(arch=arch, variance_mode=variance_mode))
    out = forward(net, tiny_state())
    assert out.eps_pred.shape == (32, 32, 1)
    if variance_mode == "learned":
        assert out.v is not None and out.v.shape == (32, 32, 1)
        v = out.v.detach()
        assert float(v.min()) >= 0.0 and float(v.max()) <= 1.0
    else:
        assert out.v is None


def test_forward_eval_is_deterministic():
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(dropout=0.3, stochastic_depth=(0.2, 0.2, 0.2)))
    st = tiny_state()
    a = forward(net, st)
    b = forward(net, st)
    assert torch.equal(a.eps_pred, b.eps_pred)


def test_forward_train_equals_eval_without_regularization():
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(dropout=0.0))
    st = tiny_state()
    trained = forward(net, st, train_mode=True, rng_seed=5)
    evaled = forward(net, st)
    torch.testing.assert_close(trained.eps_pred, evaled.eps_pred)


def test_forward_train_mode_is_replayable_per_seed():
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(dropout=0.5, stochastic_depth=(0.3, 0.3, 0.3)))
    st = tiny_state()
    a = forward(net, st, train_mode=True, rng_seed=11)
    b = forward(net, st, train_mode=True, rng_seed=11)
    c = forward(net, st, train_mode=True, rng_seed=12)
    assert torch.equal(a.eps_pred, b.eps_pred)
    assert not torch.equal(a.eps_pred, c.eps_pred)


def test_forward_rejects_channel_mismatch():
    torch.manual_seed(0)
    net = build_denoiser(tiny_config())
    with pytest.raises(ValueError):
        forward(net, tiny_state(channels=2))
    with pytest.raises(ValueError):
        forward(net, tiny_state(cond_channels=4))
    unconditional = build_denoiser(tiny_config(cond_channels=0))
    with pytest.raises(ValueError, match="no condition"):
        forward(unconditional, tiny_state())


def test_forward_doubled_input_doubles_output():
    # fully convolutional: the stage graph propagates any divisible size
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(arch="unet3plus"))
    assert forward(net, tiny_state(resolution=32)).eps_pred.shape == (32, 32, 1)
    assert forward(net, tiny_state(resolution=64)).eps_pred.shape == (64, 64, 1)


def test_net_rejects_indivisible_spatial_size():
    torch.manual_seed(0)
    net = build_denoiser(tiny_config())
    with pytest.raises(ValueError, match="divisible"):
        net(torch.randn(1, 4, 30, 30), torch.tensor([0]))


# ------------------------------------------------- time conditioning (AdaGN)


def _all_block_outputs(net, st):
    outs = []
    hooks = [
        m.register_forward_hook(lambda mod, inp, out: outs.append(out.detach().clone()))
        for m in net.modules()
        if isinstance(m, AdaGNResBlock)
    ]
    with torch.no_grad():
        forward(net, st)
    for h in hooks:
        h.remove()
    return outs


@pytest.mark.parametrize("arch", ["unet", "unet3plus"])
def test_changing_t_changes_every_resblock_output(arch):
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(arch=arch))
    st = tiny_state(t=3)
    at_3 = _all_block_outputs(net, st)
    at_11 = _all_block_outputs(net, dataclasses.replace(st, t=11))
    assert len(at_3) == len(at_11) and len(at_3) > 0
    for a, b in zip(at_3, at_11):
        assert float((a - b).abs().max()) > 0.0


# ------------------------------------------------------------ stochastic depth


def test_residual_combine_eval_matches_train_expectation():
    # Two stacked linear residual blocks: the survival scaling makes the
    # eval pass the exact expectation over drop draws, so the Monte-Carlo
    # mean must agree within 3 standard errors per component.
    torch.manual_seed(0)
    dim, p, draws = 4, 0.3, 10_000
    w1 = torch.randn(dim, dim) / dim
    w2 = torch.randn(dim, dim) / dim
    x = torch.randn(dim)

    def stage(training):
        h = residual_combine(x, w1 @ x, p, training)
        return residual_combine(h, w2 @ h, p, training)

    evaled = stage(training=False)
    torch.manual_seed(123)
    samples = torch.stack([stage(training=True) for _ in range(draws)])
    sem = samples.std(dim=0) / draws**0.5
    assert bool(((samples.mean(dim=0) - evaled).abs() <= 3.0 * sem).all())


def test_stochastic_depth_changes_train_output_only():
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(stochastic_depth=(0.5, 0.5, 0.5)))
    st = tiny_state()
    evaled = forward(net, st)
    trained = forward(net, st, train_mode=True, rng_seed=0)
    assert not torch.equal(trained.eps_pred, evaled.eps_pred)
    assert torch.equal(forward(net, st).eps_pred, evaled.eps_pred)


# ------------------------------------------------------------ structure audits


def test_no_convolution_carries_bias():
    torch.manual_seed(0)
    net = build_denoiser(tiny_config(arch="unet3plus", variance_mode="learned"))
    assert audit_bias_freedom(net) == []


@pytest.mark.parametrize("n_stages", [3, 4])
def test_unet3plus_skip_counts_match_full_scale_formula(n_stages):
    cfg = tiny_config(
        arch="unet3plus",
        dim_mults=(1, 2, 4, 4)[:n_stages],
        n_resblocks=(1,) * n_stages,
        attention_resolutions=(),
        input_resolution=2 ** (n_stages + 2),
    )
    with torch.device("meta"):
        net = build_denoiser(cfg)
    res = cfg.stage_resolutions()
    # sources at decoder stage j: encoders at res >= res[j], plus the
    # decoder chain below it (middle block included)
    expected = [
        sum(1 for r in res if r >= res[j]) + sum(1 for r in res[j + 1 :] if r < res[j])
        for j in range(n_stages - 1)
    ]
    assert audit_skip_connectivity(net) == expected == [n_stages] * (n_stages - 1)


def test_unet_decoder_uses_single_skip_per_stage():
    with torch.device("meta"):
        net = build_denoiser(tiny_config())
    assert audit_skip_connectivity(net) == [1, 1]


def test_reference_build_examples():
    # the two published example builds: structural audit plus the stated
    # 55M parameter count within 10%
    with torch.device("meta"):
        dd10 = build_denoiser(REFERENCE_RUNS["dd10"].model)
        sr121 = build_denoiser(REFERENCE_RUNS["sr121"].model)
    assert abs(count_parameters(dd10) - 55e6) / 55e6 < 0.10
    assert audit_skip_connectivity(dd10) == [4, 4, 4]
    assert dd10.cfg.out_channels == 2
    assert audit_skip_connectivity(sr121) == [1, 1, 1, 1]
    assert sr121.cfg.out_channels == 1 and sr121.cfg.cond_channels == 4


# ------------------------------------------------------- resampling blocks


def test_residual_resampling_blocks_change_spatial_size():
    torch.manual_seed(0)
    emb = torch.randn(1, 64)
    down = AdaGNResBlock(16, 32, 64, groups=8, eps=1e-5, resample="down")
    up = AdaGNResBlock(32, 16, 64, groups=8, eps=1e-5, resample="up")
    x = torch.randn(1, 16, 16, 16)
    y = down(x, emb)
    assert y.shape == (1, 32, 8, 8)
    assert up(y, emb).shape == (1, 16, 16, 16)


def test_resblock_rejects_unknown_resample():
    with pytest.raises(ValueError):
        AdaGNResBlock(8, 8, 32, groups=8, eps=1e-5, resample="sideways")


# ------------------------------------------------- condition upsampling op


def test_upsample_condition_identity_at_source_dims():
    rgbd = np.random.default_rng(0).normal(size=(5, 7, 4)).astype(np.float32)
    out = upsample_condition_rgbd(rgbd, (5, 7))
    np.testing.assert_array_equal(out, rgbd)


def test_upsample_condition_depth_keeps_value_set():
    rgbd = np.zeros((2, 2, 4), dtype=np.float32)
    rgbd[:, :, 3] = [[-1.0, 1.0], [1.0, -1.0]]
    out = upsample_condition_rgbd(rgbd, (4, 4))
    assert set(np.unique(out[:, :, 3])) == {-1.0, 1.0}


def test_upsample_condition_rgb_matches_hand_bilinear():
    # 2x2 -> 4x4 with half-pixel centers: output index i reads source
    # coordinate (i+0.5)/2-0.5 in {-0.25, 0.25, 0.75, 1.25}, clamped, so
    # the 1D weights are [1, 0] / [.75, .25] / [.25, .75] / [0, 1].
    ramp = np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float32)
    expected = np.array(
        [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ],
        dtype=np.float32,
    )
    rgbd = np.zeros((2, 2, 4), dtype=np.float32)
    for c in range(3):
        rgbd[:, :, c] = ramp * (c + 1)
    out = upsample_condition_rgbd(rgbd, (4, 4))
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], expected * (c + 1), atol=1e-6)


def test_upsample_condition_rejects_bad_inputs():
    with pytest.raises(ValueError):
        upsample_condition_rgbd(np.zeros((4, 4, 3), dtype=np.float32), (8, 8))
    with pytest.raises(ValueError):
        upsample_condition_rgbd(np.zeros((4, 4, 4), dtype=np.float32), (2, 2))


# ---------------------------------------------------------- loop integration


def test_untrained_net_samples_finite_through_the_loop():
    torch.manual_seed(0)
    cfg = tiny_config(
        base_dim=16, dim_mults=(1, 2), n_resblocks=(1, 1), attention_resolutions=(8,),
        input_resolution=16,
    )
    net = build_denoiser(cfg)
    cond = torch.randn(16, 16, 3)
    x = diffusion.sample_loop(
        as_denoiser(net), cond, (16, 16, 1), build_cosine_schedule(8), rng_seed=4
    )
    assert x.shape == (16, 16, 1)
    assert bool(torch.isfinite(x).all())
