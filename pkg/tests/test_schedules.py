"""
Tests for the noise schedules and sampler steps.
"""
import math

import numpy as np
import pytest
import torch

from errors import NumericalError, ShapeError
from schedules import NoiseSchedule, ddim_step, euler_step, forward_noise, predict_x0


class TestNoiseSchedule:
    """Test schedule coefficients and grids."""

    def test_rectified_flow_coefficients(self):
        """Test the straight-line path."""
        schedule = NoiseSchedule("rectified_flow")
        assert schedule.alpha(0.0) == 1.0 and schedule.sigma(0.0) == 0.0
        assert schedule.alpha(1.0) == 0.0 and schedule.sigma(1.0) == 1.0
        assert schedule.alpha(0.25) + schedule.sigma(0.25) == pytest.approx(1.0)

    def test_cosine_coefficients(self):
        """Test that the cosine path preserves variance."""
        schedule = NoiseSchedule("ddim_cosine")
        for t in (0.0, 0.3, 0.9, 1.0):
            assert schedule.alpha(t) ** 2 + schedule.sigma(t) ** 2 == pytest.approx(1.0)
        assert schedule.alpha(1.0) > 0.0

    def test_timesteps(self):
        """Test the uniform decreasing grid."""
        times = NoiseSchedule(num_steps=4).timesteps()
        assert times == [1.0, 0.75, 0.5, 0.25, 0.0]

    def test_default_grid_length(self):
        """Test that 28 steps give 29 grid points."""
        times = NoiseSchedule().timesteps()
        assert len(times) == 29
        assert times[0] == 1.0 and times[-1] == 0.0

    def test_invalid_arguments(self):
        """Test constructor and time range checks."""
        with pytest.raises(ValueError):
            NoiseSchedule("linear")
        with pytest.raises(ValueError):
            NoiseSchedule(num_steps=0)
        with pytest.raises(ValueError):
            NoiseSchedule().alpha(1.5)

    def test_to_dict(self):
        """Test the checkpoint form."""
        assert NoiseSchedule("ddim_cosine", 1.0, 10).to_dict() == {"kind": "ddim_cosine", "T": 1.0, "num_steps": 10}

    def test_training_target(self):
        """Test velocity vs noise targets."""
        x0, noise = torch.ones(3), torch.full((3,), 2.0)
        assert torch.equal(NoiseSchedule("rectified_flow").training_target(x0, noise), noise - x0)
        assert torch.equal(NoiseSchedule("ddim_cosine").training_target(x0, noise), noise)


class TestForwardNoise:
    """Test forward_noise."""

    def test_mixes_signal_and_noise(self):
        """Test the forward path at an interior time."""
        x0, z = np.ones(4), np.zeros(4)
        np.testing.assert_allclose(forward_noise(x0, 0.25, z, NoiseSchedule()), 0.75 * np.ones(4))

    def test_shape_mismatch(self):
        """Test that x0 and noise must agree."""
        with pytest.raises(ShapeError):
            forward_noise(np.ones(4), 0.5, np.ones(5), NoiseSchedule())


class TestSteps:
    """Test Euler and DDIM updates."""

    def test_exact_velocity_recovers_x0(self):
        """Test that one Euler step with the true velocity lands on x0."""
        schedule = NoiseSchedule()
        rng = np.random.default_rng(0)
        x0, z = rng.normal(size=8), rng.normal(size=8)
        x_t = forward_noise(x0, 1.0, z, schedule)
        np.testing.assert_allclose(schedule.step(x_t, z - x0, 1.0, 0.0), x0)

    def test_euler_rejects_negative_delta(self):
        """Test the direction check."""
        with pytest.raises(ValueError):
            euler_step(np.zeros(2), np.zeros(2), -0.1)

    def test_ddim_with_true_noise_stays_on_path(self):
        """Test that DDIM with the true noise lands on the forward path."""
        schedule = NoiseSchedule("ddim_cosine")
        rng = np.random.default_rng(1)
        x0, eps = rng.normal(size=8), rng.normal(size=8)
        x_t = forward_noise(x0, 0.8, eps, schedule)
        x_next = ddim_step(x_t, eps, 0.8, 0.3, schedule)
        np.testing.assert_allclose(x_next, forward_noise(x0, 0.3, eps, schedule), atol=1e-10)
        np.testing.assert_allclose(predict_x0(x_t, eps, 0.8, schedule), x0, atol=1e-10)

    def test_ddim_two_half_steps_match_one_step(self):
        """Test that splitting a DDIM step with the exact noise changes nothing."""
        schedule = NoiseSchedule("ddim_cosine")
        rng = np.random.default_rng(2)
        x0, eps = rng.normal(size=32), rng.normal(size=32)
        x_t = forward_noise(x0, 0.9, eps, schedule)
        one = ddim_step(x_t, eps, 0.9, 0.3, schedule)
        two = ddim_step(ddim_step(x_t, eps, 0.9, 0.6, schedule), eps, 0.6, 0.3, schedule)
        assert np.abs(one - two).max() <= 1e-6

    def test_ddim_equal_times_is_identity(self):
        """Test that a zero-length DDIM step copies the latent."""
        schedule = NoiseSchedule("ddim_cosine")
        z = torch.randn(3)
        out = ddim_step(z, torch.randn(3), 0.5, 0.5, schedule)
        assert torch.equal(out, z) and out is not z

    def test_ddim_rejects_wrong_direction_and_schedule(self):
        """Test DDIM argument checks."""
        with pytest.raises(ValueError):
            ddim_step(np.zeros(2), np.zeros(2), 0.3, 0.5, NoiseSchedule("ddim_cosine"))
        with pytest.raises(ValueError):
            ddim_step(np.zeros(2), np.zeros(2), 0.5, 0.3, NoiseSchedule("rectified_flow"))

    def test_predict_x0_alpha_floor(self):
        """Test that a vanishing alpha raises NumericalError."""
        schedule = NoiseSchedule("rectified_flow")
        with pytest.raises(NumericalError):
            predict_x0(np.zeros(2), np.zeros(2), 1.0, schedule)
        assert math.isfinite(predict_x0(np.ones(1), np.zeros(1), 0.5, schedule)[0])
