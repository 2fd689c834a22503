"""Point-cloud forecasting metrics inside a region of interest."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, PreconditionError


@dataclass(frozen=True)
class Roi:
    x: tuple = (-70.0, 70.0)
    y: tuple = (-70.0, 70.0)
    z: tuple = (-4.5, 4.5)

    def __post_init__(self):
        for name in ("x", "y", "z"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise PreconditionError(f"ROI {name} range [{lo}, {hi}] is empty")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


def _cloud(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise PreconditionError(f"point cloud must be (n, 3), got {a.shape}")
    return a


def inside(cloud, roi: Roi = Roi()) -> np.ndarray:
    c = _cloud(cloud)
    return np.all((c >= roi.lo) & (c <= roi.hi), axis=1)


def crop(cloud, roi: Roi = Roi()) -> np.ndarray:
    """Keep points inside the box, boundary included."""
    c = _cloud(cloud)
    return c[inside(c, roi)]


def _sqdist(q, p):
    d = q - p
    return np.sum(d * d, axis=-1)


def nearest_sqdist_bruteforce(a, b) -> np.ndarray:
    a, b = _cloud(a), _cloud(b)
    return np.array([np.min(_sqdist(q, b)) for q in a])


def nearest_sqdist(a, b, tree: cKDTree | None = None) -> np.ndarray:
    """Squared distance from each point of ``a`` to its nearest neighbour in ``b``.

    The tree only proposes candidates: every point within a hair of the
    tree's answer is rescored with the brute-force formula, so the result is
    bit-identical to :func:`nearest_sqdist_bruteforce`.
    """
    a, b = _cloud(a), _cloud(b)
    if tree is None:
        tree = cKDTree(b)
    d, _ = tree.query(a, k=1)
    out = np.empty(len(a))
    for i, (q, r) in enumerate(zip(a, d)):
        cand = tree.query_ball_point(q, r * (1 + 1e-9) + 1e-300)
        out[i] = np.min(_sqdist(q, b[cand]))
    return out


def chamfer(a, b, *, squared: bool = True, brute_force: bool = False) -> float:
    """Symmetric Chamfer distance: mean NN distance a->b plus mean b->a.

    With ``squared`` (the default) distances are squared, so the result is in
    square metres.
    """
    a, b = _cloud(a), _cloud(b)
    if len(a) == 0 or len(b) == 0:
        raise DomainError("chamfer distance of an empty point set")
    nn = nearest_sqdist_bruteforce if brute_force else nearest_sqdist
    ab, ba = nn(a, b), nn(b, a)
    if not squared:
        ab, ba = np.sqrt(ab), np.sqrt(ba)
    return float(np.mean(ab) + np.mean(ba))


@dataclass(frozen=True)
class DepthErrors:
    l1_mean: float
    l1_median: float
    absrel_mean: float
    absrel_median: float

    def to_dict(self) -> dict:
        return asdict(self)


def depth_errors(pred, gt) -> DepthErrors:
    """L1 depth error and AbsRel (in percent), mean and median over rays."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise PreconditionError(f"{pred.size} predictions for {gt.size} ground-truth depths")
    if pred.size == 0:
        raise PreconditionError("no depth pairs")
    bad = np.flatnonzero(~(gt > 0))
    if bad.size:
        raise DomainError(f"ground-truth depth must be positive; rays {bad[:10].tolist()} are not")
    l1 = np.abs(pred - gt)
    rel = 100.0 * l1 / gt
    return DepthErrors(float(l1.mean()), float(np.median(l1)), float(rel.mean()), float(np.median(rel)))


def metrics_report(pred_cloud, gt_cloud, pred_depth=None, gt_depth=None, *, roi: Roi = Roi(),
                   crop_gt: bool = True, squared: bool = True) -> dict:
    """JSON-ready report; ``roi_cropped_gt`` records whether ground truth was cropped too."""
    p = crop(pred_cloud, roi)
    g = crop(gt_cloud, roi) if crop_gt else _cloud(gt_cloud)
    report = {"chamfer": chamfer(p, g, squared=squared), "roi": roi.to_dict(),
              "roi_cropped_gt": crop_gt, "chamfer_squared": squared}
    if pred_depth is not None:
        e = depth_errors(pred_depth, gt_depth)
        report.update(l1_mean=e.l1_mean, l1_med=e.l1_median, absrel_mean=e.absrel_mean,
                      absrel_med=e.absrel_median)
    return report


def grid_points(tokens, shape, background: int = 0, cell: float = 1.0) -> np.ndarray:
    """Non-background cells of a token grid as (col, row, 0) points, scaled by ``cell``."""
    g = np.asarray(tokens).reshape(shape)
    rows, cols = np.nonzero(g != background)
    return np.stack([cols * cell, rows * cell, np.zeros(rows.size)], axis=1).astype(np.float64)
