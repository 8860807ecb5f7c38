"""Schedule construction and the forward noising process."""

import numpy as np
import pytest

from tiflab.schedule import Schedule, forward_sample, make_linear_schedule


class TestMakeLinearSchedule:
    def test_two_step_alpha_bars(self):
        """Products of (1-beta): 0.5 then 0.25 for constant beta=0.5."""
        s = make_linear_schedule(2, 0.5, 0.5)
        np.testing.assert_allclose(s.betas, [0.5, 0.5])
        np.testing.assert_allclose(s.alpha_bars, [0.5, 0.25])

    def test_two_step_gammas(self):
        """gamma_t = sqrt(ab)/(2 sqrt(2(1-ab))).

        Checked independently at 50-digit precision (mpmath):
        gamma_1 = sqrt(0.5)/(2*sqrt(1)) and gamma_2 = 0.5/(2*sqrt(1.5)).
        """
        s = make_linear_schedule(2, 0.5, 0.5)
        np.testing.assert_allclose(s.gammas, [0.35355339059327373, 0.20412414523193154], rtol=1e-12)

    def test_default_schedule_tail(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[-1] < 1e-4

    def test_monotone_gamma_and_alpha_bar(self):
        for T, b0, b1 in [(2, 0.5, 0.5), (50, 1e-3, 0.3), (1000, 1e-4, 0.02)]:
            s = make_linear_schedule(T, b0, b1)
            assert np.all(np.diff(s.alpha_bars) < 0)
            assert np.all(np.diff(s.gammas) < 0)
            assert np.all(np.isfinite(s.gammas)) and np.all(s.gammas > 0)
            assert np.all((s.betas > 0) & (s.betas < 1))
            assert s.alpha_bars[-1] < s.alpha_bars[0] < 1.0

    @pytest.mark.parametrize(
        "T,b0,b1",
        [(1, 0.1, 0.2), (0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.1), (10, 0.1, 1.0), (10, -0.1, 0.2)],
    )
    def test_rejects_bad_arguments(self, T, b0, b1):
        with pytest.raises(ValueError):
            make_linear_schedule(T, b0, b1)

    def test_arrays_are_readonly(self):
        s = make_linear_schedule(10, 0.01, 0.1)
        with pytest.raises(ValueError):
            s.betas[0] = 0.5


class TestForwardSample:
    def test_zero_noise(self):
        """ab=0.25 at t=2 of the constant-0.5 schedule: output is 0.5 * x0."""
        s = make_linear_schedule(2, 0.5, 0.5)
        x0 = np.array([2.0, -2.0])
        out = forward_sample(s, x0, 2, np.zeros(2))
        np.testing.assert_allclose(out, [1.0, -1.0])

    def test_terminal_step_is_noise_dominated(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        x0 = np.ones(8)
        noise = np.full(8, 3.0)
        out = forward_sample(s, x0, 1000, noise)
        np.testing.assert_allclose(out, noise, atol=0.02)

    def test_deterministic_and_linear_in_x0(self):
        s = make_linear_schedule(100, 1e-3, 0.1)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((1, 4, 4))
        y0 = rng.standard_normal((1, 4, 4))
        noise = rng.standard_normal((1, 4, 4))
        a = forward_sample(s, x0, 42, noise)
        assert np.array_equal(a, forward_sample(s, x0, 42, noise))
        lhs = forward_sample(s, 2.0 * x0 + y0, 42, noise)
        rhs = 2.0 * forward_sample(s, x0, 42, noise) + forward_sample(s, y0, 42, noise) \
            - 2.0 * forward_sample(s, np.zeros_like(x0), 42, noise)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_moment_match(self):
        """Empirical mean/variance agree with (sqrt(ab) x0, 1-ab) within 3 SE."""
        s = make_linear_schedule(100, 1e-3, 0.1)
        t = 60
        ab = s.alpha_bar(t)
        n = 10**5
        x0 = np.full(n, 0.7)
        rng = np.random.default_rng(7)
        out = forward_sample(s, x0, t, rng.standard_normal(n))
        se_mean = np.sqrt((1 - ab) / n)
        assert abs(out.mean() - np.sqrt(ab) * 0.7) < 3 * se_mean
        se_var = (1 - ab) * np.sqrt(2.0 / (n - 1))
        assert abs(out.var(ddof=1) - (1 - ab)) < 3 * se_var

    def test_shape_mismatch_and_bad_t(self):
        s = make_linear_schedule(10, 0.01, 0.1)
        with pytest.raises(ValueError):
            forward_sample(s, np.zeros(3), 1, np.zeros(4))
        for t in (0, 11, -1):
            with pytest.raises(ValueError):
                forward_sample(s, np.zeros(3), t, np.zeros(3))


def test_schedule_is_immutable_dataclass():
    s = make_linear_schedule(10, 0.01, 0.1)
    with pytest.raises(Exception):
        s.T = 20
