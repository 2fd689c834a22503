import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddwm.errors import DomainError, PreconditionError
from ddwm.metrics import Roi, chamfer, crop, depth_errors, grid_points, metrics_report, nearest_sqdist


class TestCrop:
    def test_examples(self):
        c = crop(np.array([[0.0, 0.0, 0.0], [71.0, 0.0, 0.0], [70.0, -70.0, 4.5]]))
        np.testing.assert_array_equal(c, [[0, 0, 0], [70, -70, 4.5]])

    @settings(max_examples=50)
    @given(seed=st.integers(0, 2**31), n=st.integers(0, 100))
    def test_count_and_idempotence(self, seed, n):
        cloud = np.random.default_rng(seed).uniform(-100, 100, (n, 3))
        once = crop(cloud)
        assert len(once) <= n
        assert (len(once) == n) == bool(np.all(np.abs(cloud[:, :2]) <= 70) and np.all(np.abs(cloud[:, 2]) <= 4.5))
        np.testing.assert_array_equal(crop(once), once)

    def test_bad_roi(self):
        with pytest.raises(PreconditionError):
            Roi(x=(1.0, 1.0))


class TestChamfer:
    def test_identical(self):
        a = np.random.default_rng(0).normal(size=(30, 3))
        assert chamfer(a, a) == 0.0

    def test_single_points(self):
        assert chamfer([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]) == 2.0
        assert chamfer([[0.0, 0.0, 0.0]], [[2.0, 0.0, 0.0]], squared=False) == 4.0

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = rng.uniform(-5, 5, (rng.integers(1, 201), 3))
            b = rng.uniform(-5, 5, (rng.integers(1, 201), 3))
            assert chamfer(a, b) == chamfer(a, b, brute_force=True)

    def test_exact_on_lattice_ties(self):
        # many equidistant neighbours: the candidate rescoring must still be exact
        ax = np.arange(5.0)
        b = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        a = b[:20] + 0.5
        np.testing.assert_array_equal(nearest_sqdist(a, b), np.full(20, 0.75))

    @settings(max_examples=50)
    @given(seed=st.integers(0, 2**31))
    def test_symmetric_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(rng.integers(1, 40), 3)), rng.normal(size=(rng.integers(1, 40), 3))
        assert chamfer(a, b) == chamfer(b, a)
        assert chamfer(a, b) >= 0

    def test_empty_raises(self):
        with pytest.raises(DomainError):
            chamfer(np.empty((0, 3)), [[0.0, 0.0, 0.0]])
        with pytest.raises(PreconditionError):
            chamfer(np.zeros((3, 2)), np.zeros((3, 2)))


class TestDepth:
    def test_perfect(self):
        e = depth_errors([1.0, 2.0, 5.0], [1.0, 2.0, 5.0])
        assert e.to_dict() == dict(l1_mean=0.0, l1_median=0.0, absrel_mean=0.0, absrel_median=0.0)

    def test_example(self):
        e = depth_errors([1.0, 2.0], [2.0, 2.0])
        assert e.l1_mean == 0.5 and e.l1_median == 0.5 and e.absrel_mean == 25.0

    def test_median_robust_to_outlier(self):
        pred, gt = np.array([1.1, 2.2, 2.9, 4.0, 5.1]), np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        base = depth_errors(pred, gt)
        pred2 = np.concatenate([pred, [1000.0]])
        gt2 = np.concatenate([gt, [3.0]])
        out = depth_errors(pred2, gt2)
        assert out.l1_mean > 100 * base.l1_mean
        assert out.l1_median == pytest.approx(0.1)
        assert base.l1_median == pytest.approx(0.1)

    def test_nonpositive_gt(self):
        with pytest.raises(DomainError, match=r"\[1\]"):
            depth_errors([1.0, 1.0], [1.0, 0.0])
        with pytest.raises(PreconditionError):
            depth_errors([], [])


class TestReport:
    def test_crop_modes(self):
        pred = np.array([[0.0, 0.0, 0.0]])
        gt = np.array([[1.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
        cropped = metrics_report(pred, gt)
        assert cropped["chamfer"] == 2.0 and cropped["roi_cropped_gt"]
        raw = metrics_report(pred, gt, crop_gt=False)
        assert raw["chamfer"] > cropped["chamfer"] and not raw["roi_cropped_gt"]
        full = metrics_report(pred, gt, [1.0], [2.0])
        assert set(full) >= {"chamfer", "l1_mean", "l1_med", "absrel_mean", "absrel_med", "roi"}

    def test_grid_points(self):
        tokens = np.zeros((3, 4), int)
        tokens[1, 2] = 5
        np.testing.assert_array_equal(grid_points(tokens, (3, 4)), [[2.0, 1.0, 0.0]])
