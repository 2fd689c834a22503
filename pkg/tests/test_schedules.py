import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddwm.errors import DomainError
from ddwm.schedules import (NoiseSchedule, absorbing_schedule, ceil_count, cosine_mask_fraction,
                            make_schedule, uniform_schedule)


class TestCosine:
    def test_values(self):
        assert cosine_mask_fraction(0.0) == 1.0
        assert cosine_mask_fraction(1.0) == 0.0
        assert cosine_mask_fraction(0.5) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)

    @pytest.mark.parametrize("u", [-1e-9, 1.0 + 1e-9])
    def test_domain(self, u):
        with pytest.raises(DomainError):
            cosine_mask_fraction(u)

    @given(a=st.floats(0, 1), b=st.floats(0, 1))
    def test_non_increasing(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert cosine_mask_fraction(hi) <= cosine_mask_fraction(lo)

    def test_ceil_count_roundoff(self):
        # cos(pi/3) * 100 lands a hair above 50
        assert ceil_count(cosine_mask_fraction(2 / 3), 100) == 50
        assert ceil_count(0.501, 100) == 51
        assert ceil_count(1.0, 7) == 7


class TestUniform:
    def test_first_rate(self):
        beta = uniform_schedule(10, 0.2)
        assert beta[0] == pytest.approx(1 / 50, abs=1e-15)

    def test_telescoping(self):
        beta = uniform_schedule(10, 0.2)
        keep = np.cumprod(1 - beta)
        np.testing.assert_allclose(keep, 1 - 0.02 * np.arange(1, 11), atol=1e-12)
        assert 1 - keep[-1] == pytest.approx(0.2, abs=1e-12)

    def test_full_randomization(self):
        np.testing.assert_array_equal(uniform_schedule(1, 1.0), [1.0])

    @pytest.mark.parametrize("eta", [0.0, 1.2, -0.1])
    def test_eta_domain(self, eta):
        with pytest.raises(DomainError):
            uniform_schedule(10, eta)

    @given(k_max=st.integers(1, 100), eta=st.floats(0.01, 1.0))
    def test_linear_noised_fraction(self, k_max, eta):
        keep = np.cumprod(1 - uniform_schedule(k_max, eta))
        np.testing.assert_allclose(1 - keep, eta * np.arange(1, k_max + 1) / k_max, atol=1e-12)


class TestAbsorbing:
    def test_final_step_absorbs(self):
        alpha = absorbing_schedule(10)
        assert alpha[-1] == 1.0
        assert np.prod(1 - alpha) == 0.0

    def test_two_steps(self):
        alpha = absorbing_schedule(2)
        assert alpha[0] == pytest.approx(1 - math.cos(math.pi / 4), abs=1e-15)

    def test_rates_valid_up_to_1000(self):
        for k_max in (1, 2, 7, 100, 1000):
            alpha = absorbing_schedule(k_max)
            assert np.all((alpha >= 0) & (alpha <= 1))

    @given(k_max=st.integers(1, 100))
    def test_survival_follows_cosine(self, k_max):
        surv = np.cumprod(1 - absorbing_schedule(k_max))
        target = np.cos(np.arange(1, k_max + 1) / k_max * math.pi / 2)
        target[-1] = 0.0
        np.testing.assert_allclose(surv, target, atol=1e-12)


class TestNoiseSchedule:
    def test_make_and_roundtrip(self):
        s = make_schedule(10, 0.2)
        assert s.k_max == 10
        assert s.alpha_bar(0) == 1.0
        assert s.beta_keep(10) == pytest.approx(0.8, abs=1e-12)
        cfg = s.to_config()
        assert cfg == {"K": 10, "eta": 0.2, "mask_schedule": "cosine"}
        s2 = NoiseSchedule.from_config(cfg)
        np.testing.assert_array_equal(s2.alpha, s.alpha)
        np.testing.assert_array_equal(s2.beta, s.beta)

    def test_no_uniform_noise(self):
        np.testing.assert_array_equal(make_schedule(4, 0.0).beta, np.zeros(4))

    def test_rate_sum_below_one_before_final_step(self):
        # alpha_K = 1, so only the earlier steps can satisfy alpha + beta <= 1;
        # rates compose as a product, which is valid either way
        for k_max in range(1, 200):
            s = make_schedule(k_max, 0.5)
            assert np.all(s.alpha[:-1] + s.beta[:-1] <= 1.0)
            assert s.alpha[-1] == 1.0

    def test_rejects_bad_rates(self):
        with pytest.raises(DomainError):
            NoiseSchedule([0.5, 1.2], [0.0, 0.0])
        with pytest.raises(DomainError):
            NoiseSchedule([0.5], [0.1, 0.1])
        with pytest.raises(DomainError):
            make_schedule(4, 0.2, "linear")

    def test_immutable(self):
        s = make_schedule(3, 0.2)
        with pytest.raises(ValueError):
            s.alpha[0] = 0.5
