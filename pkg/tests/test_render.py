import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddwm.errors import EmptyRayError, OutOfExtentError, PreconditionError
from ddwm.pointio import read_cloud, read_rays, write_cloud, write_rays
from ddwm.render import (SENTINEL_DEPTH, NeuralFeatureGrid, OccupancyMLP, Ray, build_skip_volume, composite,
                         composite_backward, dense_samples, interp, max_pool, render_depth, render_skipped,
                         rendering_loss, skip_samples, voxelize)
from ddwm.verify import central_differences, max_rel_error, render_instance, skip_vs_dense


def _grid(seed=0, shape=(3, 4, 5, 2)):
    rng = np.random.default_rng(seed)
    return NeuralFeatureGrid(rng.normal(size=shape), [0.0, -1.0, 2.0], [2.0, 2.0, 6.0])


class TestInterp:
    def test_exact_at_nodes(self):
        g = _grid()
        for i, j, k in [(0, 0, 0), (2, 3, 4), (1, 2, 3)]:
            np.testing.assert_allclose(interp(g, g.node(i, j, k)), g.features[i, j, k], atol=1e-14)

    def test_edge_midpoint_is_average(self):
        g = _grid(1)
        mid = 0.5 * (g.node(1, 1, 1) + g.node(1, 2, 1))
        np.testing.assert_allclose(interp(g, mid), 0.5 * (g.features[1, 1, 1] + g.features[1, 2, 1]), atol=1e-14)

    def test_convexity(self):
        g = _grid(2)
        rng = np.random.default_rng(3)
        pts = rng.uniform(g.lo, g.hi, (10_000, 3))
        vals = interp(g, pts)
        u = (pts - g.lo) / g.spacing
        i0 = np.minimum(np.floor(u).astype(int), np.array(g.shape) - 2)
        for n in range(len(pts)):
            a, b, c = i0[n]
            box = g.features[a : a + 2, b : b + 2, c : c + 2].reshape(-1, g.features.shape[3])
            assert np.all(vals[n] >= box.min(0) - 1e-12) and np.all(vals[n] <= box.max(0) + 1e-12)

    def test_affine_along_axis(self):
        g = _grid(4)
        p0, p1 = g.node(0, 1, 1) + [0.0, 0.2, 0.3], g.node(1, 1, 1) + [0.0, 0.2, 0.3]
        ts = np.linspace(0, 1, 7)
        vals = interp(g, p0 + ts[:, None] * (p1 - p0))
        np.testing.assert_allclose(vals, vals[0] + ts[:, None] * (vals[-1] - vals[0]), atol=1e-13)

    def test_out_of_extent(self):
        g = _grid()
        with pytest.raises(OutOfExtentError, match="outside"):
            interp(g, [2.5, 0.0, 3.0])

    def test_grid_validation(self):
        with pytest.raises(PreconditionError):
            NeuralFeatureGrid(np.zeros((2, 2, 2, 1)), [0, 0, 0], [1, 0, 1])
        with pytest.raises(PreconditionError):
            NeuralFeatureGrid(np.zeros((2, 2, 2)), [0, 0, 0], [1, 1, 1])


class TestComposite:
    def test_single_opaque_sample(self):
        D, w, after = composite([1.0], [3.0])
        assert D == 3.0
        np.testing.assert_array_equal(w, [1.0])

    def test_two_samples(self):
        D, w, _ = composite([0.5, 1.0], [1.0, 2.0])
        np.testing.assert_allclose(w, [0.5, 0.5])
        assert D == pytest.approx(1.5)

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=60))
    def test_telescoping(self, alpha):
        _, w, after = composite(alpha, np.arange(1, len(alpha) + 1, dtype=float))
        assert abs(w.sum() + after[-1] - 1.0) <= 1e-12
        before = np.concatenate([[1.0], after])
        assert np.all(np.diff(before) <= 0)

    def test_near_opaque_log_space(self):
        alpha = np.array([1 - 1e-9, 0.5, 1.0])
        _, w, after = composite(alpha, [1.0, 2.0, 3.0])
        assert np.all(np.isfinite(w))
        assert abs(w.sum() + after[-1] - 1.0) <= 1e-12

    def test_empty(self):
        with pytest.raises(EmptyRayError):
            composite([], [])

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        alpha = rng.uniform(0.05, 0.9, 7)
        dw = rng.normal(size=7)
        _, w, after = composite(alpha, np.arange(7.0))
        before = np.concatenate([[1.0], after[:-1]])
        g = composite_backward(alpha, w, before, dw)
        fd = central_differences(lambda: float(np.dot(dw, composite(alpha, np.arange(7.0))[1])), {"a": alpha})
        worst, _ = max_rel_error({"a": g}, fd)
        assert worst < 1e-7


class TestRay:
    def test_validation(self):
        with pytest.raises(PreconditionError):
            Ray([0, 0, 0], [1, 1, 0], [1.0])
        with pytest.raises(PreconditionError):
            Ray([0, 0, 0], [1, 0, 0], [1.0, 1.0])

    def test_no_samples_inside(self):
        g = _grid()
        with pytest.raises(EmptyRayError):
            render_depth(Ray([10, 10, 10], [1, 0, 0], [1.0, 2.0]), g, OccupancyMLP.init(2, np.random.default_rng(0)))


class TestLoss:
    def test_gradients_match_finite_differences(self):
        for seed in (0, 1):
            grid, mlp, rays, coarse, targets = render_instance(seed)
            res = rendering_loss(rays, grid, mlp, coarse, targets)
            params = {"features": grid.features, **mlp.params(), "coarse": coarse}
            analytic = {"features": res.grad_features, **res.grad_mlp, "coarse": res.grad_coarse}
            fd = central_differences(lambda: rendering_loss(rays, grid, mlp, coarse, targets).total, params, h=1e-4)
            worst, where = max_rel_error(analytic, fd)
            assert worst <= 1e-4, where

    def test_squared_penalty_gradients(self):
        grid, mlp, rays, coarse, targets = render_instance(2)
        res = rendering_loss(rays, grid, mlp, coarse, targets, penalty="squared")
        fd = central_differences(
            lambda: rendering_loss(rays, grid, mlp, coarse, targets, penalty="squared").total,
            {"features": grid.features}, h=1e-4)
        worst, where = max_rel_error({"features": res.grad_features}, fd)
        assert worst <= 1e-4, where

    def test_perfect_render_is_bce_only(self):
        # identity MLP on a huge constant feature: the first sample is opaque and sits on the surface
        grid = NeuralFeatureGrid(np.full((2, 2, 2, 1), 60.0), np.zeros(3), np.full(3, 4.0))
        ray = Ray([0.5, 0.5, 0.5], [1, 0, 0], [1.0, 1.5, 2.0], gt_depth=1.0)
        coarse, targets = np.array([2.0, -1.0]), np.array([1.0, 0.0])
        res = rendering_loss([ray], grid, OccupancyMLP.identity(), coarse, targets)
        assert res.depth_l1 < 1e-12 and res.concentration < 1e-12
        assert res.total == pytest.approx(res.bce, abs=1e-12)

    @pytest.mark.parametrize("penalty", ["linear", "squared"])
    def test_far_alpha_raises_concentration(self, penalty):
        # one-channel features along a ray, identity MLP: alpha_i = sigmoid(feature at sample i)
        feats = np.zeros((4, 2, 2, 1))
        feats[:, :, :, 0] = np.array([-1.0, -0.5, 0.0, 0.5])[:, None, None]
        grid = NeuralFeatureGrid(feats, np.zeros(3), np.array([3.0, 1.0, 1.0]))
        ray = Ray([0.0, 0.0, 0.0], [1, 0, 0], [0.0, 1.0, 2.0, 3.0], gt_depth=3.0)
        base = rendering_loss([ray], grid, OccupancyMLP.identity(), np.zeros(1), np.zeros(1), penalty=penalty)
        grid.features[1, :, :, 0] += 0.3
        bumped = rendering_loss([ray], grid, OccupancyMLP.identity(), np.zeros(1), np.zeros(1), penalty=penalty)
        assert bumped.concentration > base.concentration

    def test_empty_ray_excluded(self):
        grid, mlp, rays, coarse, targets = render_instance(0)
        outside = Ray([9, 9, 9], [1, 0, 0], [1.0], gt_depth=1.0)
        a = rendering_loss(rays, grid, mlp, coarse, targets)
        b = rendering_loss(rays + [outside], grid, mlp, coarse, targets)
        assert b.total == pytest.approx(a.total, rel=1e-14)
        assert b.depths[-1] == SENTINEL_DEPTH

    def test_errors(self):
        grid, mlp, rays, coarse, targets = render_instance(0)
        with pytest.raises(PreconditionError):
            rendering_loss(rays, grid, mlp, coarse, targets, epsilon=0.0)
        with pytest.raises(PreconditionError):
            rendering_loss([Ray([0.5] * 3, [1, 0, 0], [1.0])], grid, mlp, coarse, targets)


class TestSkipping:
    lo, hi, shape = np.zeros(3), np.full(3, 16.0), (16, 16, 4)

    def test_empty_cloud(self):
        sv = build_skip_volume(self.lo, self.hi, self.shape, points=np.empty((0, 3)))
        assert not sv.fine.any() and not sv.pooled.any()

    def test_single_point(self):
        sv = build_skip_volume(self.lo, self.hi, self.shape, points=[[9.5, 3.2, 5.0]])
        assert sv.fine.sum() == 1 and sv.fine[9, 3, 1]
        assert sv.pooled.shape == (2, 2, 4)
        assert sv.pooled.sum() == 1 and sv.pooled[1, 0, 1]

    def test_recall_on_random_clouds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pts = rng.uniform(-1, 17, (rng.integers(1, 200), 3))
            shape = tuple(rng.integers(3, 20, 3))
            factor = tuple(rng.integers(1, 5, 3))
            sv = build_skip_volume(self.lo, self.hi, shape, points=pts, factor=factor)
            for idx in np.argwhere(sv.fine):
                assert sv.pooled[tuple(idx // np.array(factor))]
            # pooled cell set iff some covered fine voxel is set
            np.testing.assert_array_equal(sv.pooled, max_pool(sv.fine, factor))

    def test_logits_threshold(self):
        logits = np.full((4, 4, 2), -1.0)
        logits[1, 2, 0] = 0.0
        sv = build_skip_volume(self.lo, self.hi, (4, 4, 2), logits=logits, factor=(2, 2, 1))
        assert sv.fine.sum() == 1 and sv.pooled[0, 1, 0]
        with pytest.raises(PreconditionError):
            build_skip_volume(self.lo, self.hi, (4, 4, 2))

    def test_all_occupied_is_uniform(self):
        sv = build_skip_volume(self.lo, self.hi, (4, 4, 4), logits=np.ones((4, 4, 4)), factor=(2, 2, 2))
        ray = Ray([0.0, 5.0, 5.0], [1, 0, 0], [0.0])
        np.testing.assert_allclose(skip_samples(ray, sv, 20), dense_samples(ray, self.lo, self.hi, 20), atol=1e-12)

    def test_single_cell_interval(self):
        logits = np.full((4, 4, 4), -5.0)
        logits[2, 1, 1] = 5.0
        sv = build_skip_volume(self.lo, self.hi, (4, 4, 4), logits=logits, factor=(1, 1, 1))
        ray = Ray([0.0, 5.0, 6.0], [1, 0, 0], [0.0])
        h = skip_samples(ray, sv, 10)
        assert len(h) == 10
        assert np.all((h > 8.0) & (h < 12.0))
        miss = Ray([0.0, 13.0, 13.0], [1, 0, 0], [0.0])
        assert skip_samples(miss, sv, 10).size == 0
        grid = NeuralFeatureGrid(np.zeros((2, 2, 2, 1)), self.lo, self.hi)
        assert render_skipped(miss, grid, OccupancyMLP.identity(), sv, 10) == SENTINEL_DEPTH

    def test_voxelize_drops_outside(self):
        occ = voxelize([[16.0, 16.0, 16.0], [20.0, 1.0, 1.0]], self.lo, self.hi, (4, 4, 4))
        assert occ.sum() == 1 and occ[3, 3, 3]

    def test_skip_matches_dense_on_sphere(self):
        worst, diagonal = skip_vs_dense(0)
        assert worst < diagonal


class TestPointIO:
    def test_cloud_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        sidecar_path = write_cloud(tmp_path / "c", pts, {"frame": 3})
        back, sidecar = read_cloud(tmp_path / "c.bin")
        np.testing.assert_array_equal(back, pts.astype(np.float32))
        assert sidecar["count"] == 50 and sidecar["meta"] == {"frame": 3}
        np.testing.assert_array_equal(sidecar["extents"]["lo"], back.min(0))
        assert (tmp_path / "c.bin").stat().st_size == 50 * 12
        assert sidecar_path.suffix == ".json"

    def test_rays_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        o = rng.normal(size=(5, 3))
        d = rng.normal(size=(5, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        write_rays(tmp_path / "r", o, d, rng.uniform(1, 5, 5))
        o2, d2, g2, _ = read_rays(tmp_path / "r")
        np.testing.assert_allclose(o2, o, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(d2, axis=1), 1.0, atol=1e-12)
        for i in range(5):
            Ray(o2[i], d2[i], [1.0], gt_depth=g2[i])

    def test_count_mismatch(self, tmp_path):
        write_cloud(tmp_path / "c", np.zeros((4, 3)))
        (tmp_path / "c.bin").write_bytes(b"\0" * 24)
        with pytest.raises(ValueError):
            read_cloud(tmp_path / "c")
