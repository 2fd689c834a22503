import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ddwm.corruption import (ObjectiveKind, apply_objective, build_temporal_mask, corrupt, mask_count,
                             sample_objective)
from ddwm.errors import PreconditionError
from ddwm.schedules import ceil_count, cosine_mask_fraction

M = 8


def _x0(n, rng):
    return rng.integers(0, M, n)


class TestCorrupt:
    def test_identity_corruption(self):
        rng = np.random.default_rng(0)
        x0 = _x0(64, rng)
        s = corrupt(x0, M, rng, u0=1.0, u1=0.0)
        np.testing.assert_array_equal(s.corrupted, x0)
        assert s.mask_positions.size == 0 and s.noise_positions.size == 0

    def test_full_masking(self):
        rng = np.random.default_rng(1)
        s = corrupt(_x0(64, rng), M, rng, u0=0.0, u1=1.0)
        assert np.all(s.corrupted == M)
        assert s.noise_positions.size == 0

    def test_counts_example(self):
        rng = np.random.default_rng(2)
        u0 = 2 / 3  # cos(pi/3) = 0.5
        s = corrupt(_x0(100, rng), M, rng, u0=u0, u1=1.0, eta=0.2)
        assert s.mask_positions.size == 50
        assert s.noise_positions.size == 10
        assert np.intersect1d(s.mask_positions, s.noise_positions).size == 0

    def test_noise_values_uniform(self):
        rng = np.random.default_rng(3)
        x0 = np.zeros(100, dtype=np.int64)
        counts = np.zeros(M)
        draws = 0
        while draws < 100_000:
            s = corrupt(x0, M, rng, u0=2 / 3, u1=1.0, eta=1.0)
            vals = s.corrupted[s.noise_positions]
            counts += np.bincount(vals, minlength=M)
            draws += vals.size
        assert stats.chisquare(counts).pvalue > 0.01

    def test_rejects_mask_tokens(self):
        rng = np.random.default_rng(4)
        x0 = _x0(10, rng)
        x0[3] = M
        with pytest.raises(PreconditionError):
            corrupt(x0, M, rng)

    @settings(max_examples=200)
    @given(n=st.integers(1, 300), u0=st.floats(0, 1), u1=st.floats(0, 1), seed=st.integers(0, 2**31))
    def test_invariants(self, n, u0, u1, seed):
        rng = np.random.default_rng(seed)
        x0 = _x0(n, rng)
        s = corrupt(x0, M, rng, u0=u0, u1=u1)
        assert s.mask_positions.size == ceil_count(cosine_mask_fraction(u0), n)
        assert s.noise_positions.size == round(u1 * 0.2 * (n - s.mask_positions.size))
        assert np.intersect1d(s.mask_positions, s.noise_positions).size == 0
        assert s.corrupted.max() <= M
        untouched = np.setdiff1d(np.arange(n), np.union1d(s.mask_positions, s.noise_positions))
        np.testing.assert_array_equal(s.corrupted[untouched], x0[untouched])
        assert np.all(s.corrupted[s.noise_positions] < M)

    def test_mask_count_exact_sweep(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            n = int(rng.integers(1, 500))
            u0 = float(rng.random())
            assert mask_count(cosine_mask_fraction, u0, n) == math.ceil(math.cos(u0 * math.pi / 2) * n - 1e-9)

    def test_seeded_replay(self):
        x0 = _x0(50, np.random.default_rng(6))
        a = corrupt(x0, M, np.random.default_rng(7))
        b = corrupt(x0, M, np.random.default_rng(7))
        np.testing.assert_array_equal(a.corrupted, b.corrupted)
        assert (a.u0, a.u1) == (b.u0, b.u1)


class TestObjectives:
    def test_seeded_sequence(self):
        a = [sample_objective(np.random.default_rng([1, i])).kind for i in range(20)]
        b = [sample_objective(np.random.default_rng([1, i])).kind for i in range(20)]
        assert a == b

    def test_frequencies(self):
        rng = np.random.default_rng(8)
        kinds = [sample_objective(rng).kind for _ in range(100_000)]
        for kind, p in [(ObjectiveKind.FUTURE_ONLY, 0.5), (ObjectiveKind.JOINT, 0.4), (ObjectiveKind.PER_FRAME, 0.1)]:
            assert abs(kinds.count(kind) / len(kinds) - p) < 0.01

    def test_weights_sum_to_one(self):
        assert sum(sample_objective(np.random.default_rng(0)).weights) == pytest.approx(1.0)
        with pytest.raises(PreconditionError):
            sample_objective(np.random.default_rng(0), (0.5, 0.5, 0.5))


class TestTemporalMask:
    def test_causal(self):
        np.testing.assert_array_equal(build_temporal_mask(3, "causal").matrix,
                                      [[1, 0, 0], [1, 1, 0], [1, 1, 1]])

    def test_identity(self):
        np.testing.assert_array_equal(build_temporal_mask(3, "identity").matrix, np.eye(3))

    def test_cfg_extended(self):
        m = build_temporal_mask(2, "cfg_extended")
        assert m.size == 3
        np.testing.assert_array_equal(m.matrix, [[1, 0, 0], [1, 1, 0], [0, 0, 1]])

    def test_errors(self):
        with pytest.raises(PreconditionError):
            build_temporal_mask(0, "causal")
        with pytest.raises(PreconditionError):
            build_temporal_mask(2, "banded")


class TestApplyObjective:
    def _frames(self, T=4, n=16, seed=0):
        return np.random.default_rng(seed).integers(0, M, (T, n))

    def test_future_only_split(self):
        frames = self._frames()
        for seed in range(40):
            s = apply_objective(frames, M, ObjectiveKind.FUTURE_ONLY, np.random.default_rng(seed))
            assert 1 <= s.split <= 3
            np.testing.assert_array_equal(s.corrupted[: s.split], frames[: s.split])
            assert not s.loss_mask[: s.split].any()
            assert s.loss_mask[s.split :].all()
            assert s.temporal_mask.mode == "causal"
            assert all(x is None for x in s.samples[: s.split])

    def test_future_only_split_at_third_frame(self):
        frames = self._frames()
        seeds = [sd for sd in range(100)
                 if apply_objective(frames, M, ObjectiveKind.FUTURE_ONLY, np.random.default_rng(sd)).split == 2]
        s = apply_objective(frames, M, ObjectiveKind.FUTURE_ONLY, np.random.default_rng(seeds[0]))
        np.testing.assert_array_equal(s.corrupted[:2], frames[:2])
        assert s.samples[2] is not None and s.samples[3] is not None

    def test_joint_scores_everything(self):
        s = apply_objective(self._frames(), M, ObjectiveKind.JOINT, np.random.default_rng(1))
        assert s.loss_mask.all()
        assert s.split == 0
        assert s.temporal_mask.mode == "causal"

    def test_per_frame_independent_draws(self):
        s = apply_objective(self._frames(T=5), M, ObjectiveKind.PER_FRAME, np.random.default_rng(2))
        assert s.temporal_mask.mode == "identity"
        assert len({x.u0 for x in s.samples}) == 5
        assert len({x.u1 for x in s.samples}) == 5

    def test_masked_only_loss(self):
        s = apply_objective(self._frames(), M, ObjectiveKind.JOINT, np.random.default_rng(3), loss_on="masked")
        np.testing.assert_array_equal(s.loss_mask, s.corrupted == M)

    def test_conditional_needs_two_frames(self):
        with pytest.raises(PreconditionError):
            apply_objective(self._frames(T=1), M, ObjectiveKind.JOINT, np.random.default_rng(0))
        apply_objective(self._frames(T=1), M, ObjectiveKind.PER_FRAME, np.random.default_rng(0))
