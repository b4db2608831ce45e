import math

import numpy as np
import pytest

from depthdiff.schedule import (
    NoiseSchedule,
    build_cosine_schedule,
    build_linear_schedule,
    p2_weight,
)

# Independent hand evaluation of the cosine profile at T=4:
#   f(t) = cos(((t/4 + 0.008)/1.008) * pi/2)^2
#   beta_t = min(1 - f(t)/f(t-1), 0.999),  alpha_bar = running product of (1-beta).
# The final ratio is ~1 - 3.7e-33 and therefore hits the 0.999 clip.
COSINE_T4_BETA = np.array(
    [0.1529878386730953, 0.41695808751199426, 0.7078587123971634, 0.999]
)
COSINE_T4_ALPHA_BAR = np.array(
    [0.8470121613269047, 0.4938435904406378, 0.14427210238573585, 0.00014427210238573596]
)


def test_cosine_t4_matches_hand_evaluation():
    s = build_cosine_schedule(4)
    np.testing.assert_allclose(s.beta, COSINE_T4_BETA, rtol=1e-12)
    np.testing.assert_allclose(s.alpha_bar, COSINE_T4_ALPHA_BAR, rtol=1e-12)


def test_cosine_starts_near_one_and_ends_near_zero():
    s = build_cosine_schedule(600)
    assert abs(s.alpha_bar[0] - 1.0) < 1e-2
    assert s.alpha_bar[599] < 1e-3
    assert s.beta.max() <= 0.999


def test_cosine_rejects_tiny_T():
    with pytest.raises(ValueError):
        build_cosine_schedule(1)


def test_linear_endpoints():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    assert s.beta[0] == pytest.approx(1e-4)
    assert s.beta[999] == pytest.approx(0.02)


def test_linear_t2_hand_products():
    s = build_linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=1e-12)
    # posterior variance at the second step: ((1-0.9)/(1-0.72)) * 0.2
    assert s.beta_tilde[1] == pytest.approx(0.1 / 0.28 * 0.2, rel=1e-12)
    assert s.beta_tilde[0] == 0.0


def test_linear_rejects_bad_bounds():
    for args in [(10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0), (1, 0.1, 0.2)]:
        with pytest.raises(ValueError):
            build_linear_schedule(*args)


@pytest.mark.parametrize("build", [
    lambda: build_cosine_schedule(600),
    lambda: build_cosine_schedule(4),
    lambda: build_linear_schedule(1000, 1e-4, 0.02),
    lambda: build_linear_schedule(2, 0.1, 0.2),
])
def test_schedule_invariants(build):
    s = build()
    # stored cumulative product matches a brute-force left-to-right product
    acc, brute = 1.0, np.empty(s.T)
    for t in range(s.T):
        acc *= 1.0 - s.beta[t]
        brute[t] = acc
    np.testing.assert_allclose(s.alpha_bar, brute, rtol=1e-12)
    assert np.all(s.beta_tilde <= s.beta + 1e-15)
    assert np.all(np.diff(s.snr) < 0.0)
    assert np.all(np.diff(s.alpha_bar) < 0.0)
    assert s.alpha_bar[0] < 1.0


def test_alpha_bar_prev_convention():
    s = build_linear_schedule(2, 0.1, 0.2)
    assert s.alpha_bar_prev(0) == 1.0
    assert s.alpha_bar_prev(1) == pytest.approx(0.9)


def test_p2_weight_values():
    s = build_cosine_schedule(600)
    # gamma=0 disables the weighting everywhere
    for t in (0, 299, 599):
        assert p2_weight(s, t, k=1.0, gamma=0.0) == 1.0
    # snr=1 with k=1, gamma=1 halves the weight; snr=3 with gamma=0.5 -> 1/sqrt(4)
    t_mid = int(np.argmin(np.abs(s.snr - 1.0)))
    snr = s.snr[t_mid]
    assert p2_weight(s, t_mid, k=1.0, gamma=1.0) == pytest.approx(1.0 / (1.0 + snr))
    synthetic = NoiseSchedule(
        T=2,
        beta=np.array([0.1, 0.2]),
        alpha=np.array([0.9, 0.8]),
        alpha_bar=np.array([0.75, 0.25]),
        beta_tilde=np.array([0.0, 0.1]),
        snr=np.array([3.0, 1.0 / 3.0]),
    )
    assert p2_weight(synthetic, 0, k=1.0, gamma=0.5) == pytest.approx(0.5)
    assert p2_weight(synthetic, 1, k=1.0, gamma=1.0) == pytest.approx(0.75)


def test_p2_weight_validation():
    s = build_cosine_schedule(4)
    with pytest.raises(IndexError):
        p2_weight(s, 4)
    with pytest.raises(ValueError):
        p2_weight(s, 0, k=0.0)
    with pytest.raises(ValueError):
        p2_weight(s, 0, gamma=-1.0)


def test_monotone_decreasing_snr_large_T():
    s = build_cosine_schedule(1000)
    assert np.all(np.diff(s.snr) < 0.0)
    assert math.isfinite(s.snr[0])
