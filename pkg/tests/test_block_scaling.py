import numpy as np
import pytest

from cpri_compression.block_scaling import ScalingConfig, compute_and_apply_scaling, rescale
from cpri_compression.exceptions import ImproperlyConfigured, InputShapeError


def test_factors_are_block_peaks_rounded_up():
    x = np.array([3.2 + 0j, 0.5j, 0.1, -0.2])

    scaled = compute_and_apply_scaling(x, ScalingConfig(n_s=2, q_s=4))

    np.testing.assert_array_equal(scaled.t, [4, 1])
    np.testing.assert_allclose(scaled.s, [0.8, 0.125j, 0.1, -0.2])


def test_scaled_components_stay_within_unit_range(ctx, frames):
    x_prime = np.fft.ifft(np.fft.fft(frames, axis=-1)[:, :40], axis=-1) * 50

    scaled = compute_and_apply_scaling(x_prime, ctx.scaling)

    assert scaled.t.shape == (24, 2)
    assert np.abs(scaled.s.real).max() <= 1.0
    assert np.abs(scaled.s.imag).max() <= 1.0


def test_last_block_is_padded():
    scaled = compute_and_apply_scaling(np.full(5, 2.5 + 0j), ScalingConfig(n_s=2, q_s=4))

    np.testing.assert_array_equal(scaled.t, [3, 3, 3])
    assert scaled.s.shape == (5,)


def test_factors_saturate_at_the_field_width():
    scaled = compute_and_apply_scaling(np.array([10.0 + 0j, 1.0]), ScalingConfig(n_s=2, q_s=2))

    np.testing.assert_array_equal(scaled.t, [3])


def test_rescale_inverts_scaling():
    x = np.random.default_rng(0).standard_normal(7) * 4 + 1j * np.random.default_rng(1).standard_normal(7)
    config = ScalingConfig(n_s=3, q_s=8)

    scaled = compute_and_apply_scaling(x, config)

    np.testing.assert_allclose(rescale(scaled.s, scaled.t, config), x)


def test_rescale_checks_the_factor_count():
    with pytest.raises(InputShapeError) as error:
        rescale(np.zeros(4), np.ones(1), ScalingConfig(n_s=2, q_s=4))

    assert str(error.value) == "1 scaling factors do not cover 4 samples in blocks of 2"


@pytest.mark.parametrize("n_s, q_s", [(0, 8), (4, 0), (4, 16)])
def test_rejects_invalid_configurations(n_s, q_s):
    with pytest.raises(ImproperlyConfigured):
        ScalingConfig(n_s=n_s, q_s=q_s)


def test_empty_frames_cannot_be_scaled():
    with pytest.raises(InputShapeError):
        compute_and_apply_scaling(np.zeros(0, dtype=complex), ScalingConfig(n_s=2, q_s=4))
