import numpy as np
import pytest

from depthdiff.augment import (
    AugmentConfig,
    apply_scale_shift,
    apply_sr_condition_augment,
    depth_noise,
    gaussian_kernel3,
    random_scale_shift,
    rgb_blur,
)

# Hand-normalized 3x3 Gaussian at sigma=0.6: weights proportional to
# exp(-r^2 / 0.72) for r^2 in {0, 1, 2}, divided by
# Z = 1 + 4*exp(-1/0.72) + 4*exp(-2/0.72) = 2.24611493119765.
SIGMA06_CENTER = 0.4452131928381734
SIGMA06_EDGE = 0.11101489301099086
SIGMA06_CORNER = 0.027681808779465796


def test_config_validation():
    AugmentConfig()  # defaults are legal
    with pytest.raises(ValueError):
        AugmentConfig(blur_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(blur_sigma_max=-0.1)
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugmentConfig(shift_range=-1)


# -------------------------------------------------------------------- blur


def test_kernel_sums_to_one_for_any_sigma():
    for sigma in [0.0, 0.05, 0.3, 0.6, 2.0]:
        assert abs(gaussian_kernel3(sigma).sum() - 1.0) <= 1e-9


def test_kernel_sigma_zero_is_delta():
    expected = np.zeros((3, 3))
    expected[1, 1] = 1.0
    np.testing.assert_array_equal(gaussian_kernel3(0.0), expected)


def test_kernel_sigma06_matches_hand_weights():
    k = gaussian_kernel3(0.6)
    assert k[1, 1] == pytest.approx(SIGMA06_CENTER, rel=1e-12)
    for edge in [k[0, 1], k[1, 0], k[1, 2], k[2, 1]]:
        assert edge == pytest.approx(SIGMA06_EDGE, rel=1e-12)
    for corner in [k[0, 0], k[0, 2], k[2, 0], k[2, 2]]:
        assert corner == pytest.approx(SIGMA06_CORNER, rel=1e-12)


def test_blur_sigma_zero_is_identity():
    rgb = np.random.default_rng(0).normal(size=(8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(rgb_blur(rgb, 0.0), rgb)


def test_blur_keeps_constant_images():
    rgb = np.full((6, 6, 3), 0.37, dtype=np.float32)
    np.testing.assert_allclose(rgb_blur(rgb, 0.6), rgb, atol=1e-6)


def test_blur_spreads_single_pixel_by_kernel_weights():
    img = np.zeros((5, 5, 3), dtype=np.float32)
    img[2, 2, :] = 1.0
    out = rgb_blur(img, 0.6)
    for c in range(3):
        np.testing.assert_allclose(
            out[1:4, 1:4, c], gaussian_kernel3(0.6), atol=1e-6
        )
    assert out[0].sum() == 0.0  # nothing leaks beyond the 3x3 footprint


def test_blur_rejects_negative_sigma():
    with pytest.raises(ValueError):
        rgb_blur(np.zeros((4, 4, 3), dtype=np.float32), -0.1)


# ------------------------------------------------------------------- noise


def test_noise_sigma_zero_is_identity():
    d = np.random.default_rng(0).uniform(-1, 1, size=(8, 8, 1)).astype(np.float32)
    np.testing.assert_array_equal(depth_noise(d, 0.0, rng_seed=3), d)


def test_noise_std_and_mean_at_sigma_006():
    d = np.zeros((1000, 1000, 1), dtype=np.float32)
    delta = depth_noise(d, 0.06, rng_seed=11) - d
    assert abs(delta.std() - 0.06) / 0.06 < 0.01
    # mean-preserving at the sigma/sqrt(n) rate
    assert abs(delta.mean()) < 3.0 * 0.06 / 1000.0


def test_noise_is_not_clipped():
    d = np.full((64, 64, 1), -1.0, dtype=np.float32)
    out = depth_noise(d, 0.06, rng_seed=0)
    assert out.min() < -1.0


def test_noise_deterministic_per_seed():
    d = np.zeros((16, 16, 1), dtype=np.float32)
    np.testing.assert_array_equal(depth_noise(d, 0.05, 7), depth_noise(d, 0.05, 7))
    assert not np.array_equal(depth_noise(d, 0.05, 7), depth_noise(d, 0.05, 8))


def test_noise_rejects_negative_sigma():
    with pytest.raises(ValueError):
        depth_noise(np.zeros((4, 4, 1), dtype=np.float32), -0.01, 0)


# ------------------------------------------------------------- scale/shift


def test_scale_shift_identity():
    img = np.random.default_rng(0).uniform(-1, 1, size=(9, 9, 3)).astype(np.float32)
    np.testing.assert_array_equal(apply_scale_shift(img, 1.0, (0, 0)), img)


def test_pure_shift_moves_hot_pixel_two_columns():
    img = np.zeros((9, 9, 1), dtype=np.float32)
    img[4, 3, 0] = 1.0
    out = apply_scale_shift(img, 1.0, (2, 0))
    assert out[4, 5, 0] == 1.0
    assert out.sum() == 1.0 - 9 * 2  # vacated columns filled with -1


def test_depth_transform_preserves_value_set():
    rng = np.random.default_rng(4)
    values = np.array([-1.0, -0.2, 0.3, 0.9], dtype=np.float32)
    d = values[rng.integers(0, 4, size=(16, 16))][:, :, None]
    out = apply_scale_shift(d, 0.8, (3, -2))
    assert set(np.unique(out)) <= set(values.tolist())


def test_inward_shift_leaves_background_border():
    d = np.full((8, 8, 1), 0.5, dtype=np.float32)
    out = apply_scale_shift(d, 1.0, (3, 0))
    assert np.all(out[:, :3, 0] == -1.0)
    rgb = np.full((8, 8, 3), 0.5, dtype=np.float32)
    assert np.all(apply_scale_shift(rgb, 1.0, (3, 0))[:, :3] == 0.0)


def test_joint_rgbd_transform_shares_geometry():
    rgbd = np.zeros((9, 9, 4), dtype=np.float32)
    rgbd[:, :, 3] = -1.0
    rgbd[4, 4, :3] = 1.0
    rgbd[4, 4, 3] = 0.5
    out = apply_scale_shift(rgbd, 1.0, (2, 1))
    assert out[5, 6, 3] == 0.5  # depth went nearest to the same target
    assert out[5, 6, :3].max() > 0.0  # rgb content moved with it


def test_random_scale_shift_deterministic_per_seed():
    cfg = AugmentConfig(scale_range=(0.8, 1.2), shift_range=3)
    img = np.random.default_rng(0).uniform(-1, 1, size=(16, 16, 1)).astype(np.float32)
    a = random_scale_shift(img, cfg, rng_seed=5)
    b = random_scale_shift(img, cfg, rng_seed=5)
    c = random_scale_shift(img, cfg, rng_seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# ------------------------------------------------------------- composition


def _sample_rgbd(seed=0):
    rng = np.random.default_rng(seed)
    rgbd = rng.uniform(-1, 1, size=(12, 12, 4)).astype(np.float32)
    return rgbd


def test_composed_augment_all_off_is_identity():
    cfg = AugmentConfig(
        blur_prob=0.0, depth_noise_sigma_max=0.0, scale_range=(1.0, 1.0), shift_range=0
    )
    rgbd = _sample_rgbd()
    np.testing.assert_array_equal(apply_sr_condition_augment(rgbd, cfg, 3), rgbd)


def test_composed_augment_deterministic_per_seed():
    cfg = AugmentConfig(blur_prob=0.5, scale_range=(0.9, 1.1), shift_range=2)
    rgbd = _sample_rgbd()
    a = apply_sr_condition_augment(rgbd, cfg, 9)
    b = apply_sr_condition_augment(rgbd, cfg, 9)
    c = apply_sr_condition_augment(rgbd, cfg, 10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_composed_augment_touches_expected_channels():
    # geometric part disabled: blur affects RGB only, noise affects depth only
    rgbd = _sample_rgbd()
    blur_only = AugmentConfig(blur_prob=1.0, blur_sigma_max=0.6, depth_noise_sigma_max=0.0)
    out = apply_sr_condition_augment(rgbd, blur_only, 1)
    assert not np.array_equal(out[:, :, :3], rgbd[:, :, :3])
    np.testing.assert_array_equal(out[:, :, 3], rgbd[:, :, 3])
    noise_only = AugmentConfig(blur_prob=0.0, depth_noise_sigma_max=0.06)
    out = apply_sr_condition_augment(rgbd, noise_only, 1)
    np.testing.assert_array_equal(out[:, :, :3], rgbd[:, :, :3])
    assert not np.array_equal(out[:, :, 3], rgbd[:, :, 3])


def test_composed_augment_rejects_bad_shape():
    with pytest.raises(ValueError):
        apply_sr_condition_augment(np.zeros((8, 8, 3), dtype=np.float32), AugmentConfig(), 0)
