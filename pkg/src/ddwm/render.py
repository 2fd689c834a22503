"""Differentiable expected-depth rendering on a neural feature grid, with spatial skipping.

Pipeline for one ray ``r(h) = o + h d``: sample depths ``h_i`` -> trilinear
feature lookup -> occupancy MLP -> ``alpha_i = sigmoid(logit_i)`` ->
``w_i = alpha_i * prod_{j<i} (1 - alpha_j)`` -> ``D = sum_i w_i h_i``.
Every step has a hand-written backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRayError, OutOfExtentError, PreconditionError

# depth rendered for rays whose skip intersection is empty
SENTINEL_DEPTH = np.inf
LOG_SPACE_ALPHA = 1.0 - 1e-7
UNIT_TOL = 1e-9
MLP_HIDDEN = 32


# -- feature grid -----------------------------------------------------------


@dataclass
class NeuralFeatureGrid:
    """Features on a regular lattice whose first and last nodes sit on the extents."""

    features: np.ndarray  # (X, Y, Z, d)
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if self.features.ndim != 4 or self.features.shape[3] < 1:
            raise PreconditionError(f"features must be (X, Y, Z, d >= 1), got {self.features.shape}")
        if min(self.features.shape[:3]) < 2:
            raise PreconditionError("each lattice axis needs at least 2 nodes")
        if np.any(self.hi <= self.lo):
            raise PreconditionError(f"extents must be positive, got lo={self.lo} hi={self.hi}")

    @property
    def shape(self) -> tuple:
        return self.features.shape[:3]

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.shape) - 1)

    def node(self, i: int, j: int, k: int) -> np.ndarray:
        return self.lo + np.array([i, j, k]) * self.spacing

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)


@dataclass
class InterpCache:
    corners: np.ndarray  # (n, 8) flat node indices
    weights: np.ndarray  # (n, 8)


def _corner_weights(grid: NeuralFeatureGrid, points: np.ndarray):
    dims = np.array(grid.shape)
    u = (points - grid.lo) / (grid.hi - grid.lo) * (dims - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
    t = u - i0
    corners, weights = [], []
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                idx = i0 + np.array([a, b, c])
                corners.append(np.ravel_multi_index(idx.T, grid.shape))
                wa = t[:, 0] if a else 1 - t[:, 0]
                wb = t[:, 1] if b else 1 - t[:, 1]
                wc = t[:, 2] if c else 1 - t[:, 2]
                weights.append(wa * wb * wc)
    return InterpCache(np.stack(corners, 1), np.stack(weights, 1))


def interp(grid: NeuralFeatureGrid, points, *, return_cache: bool = False):
    """Trilinear interpolation of lattice features at ``points`` (n, 3) -> (n, d)."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    bad = ~grid.contains(p)
    if np.any(bad):
        raise OutOfExtentError(f"query points outside [{grid.lo}, {grid.hi}]: {p[bad][:5].tolist()}")
    cache = _corner_weights(grid, p)
    flat = grid.features.reshape(-1, grid.features.shape[3])
    out = np.einsum("nc,ncd->nd", cache.weights, flat[cache.corners])
    if single:
        out = out[0]
    return (out, cache) if return_cache else out


def interp_backward(grid: NeuralFeatureGrid, cache: InterpCache, dout: np.ndarray) -> np.ndarray:
    d = grid.features.shape[3]
    g = np.zeros((int(np.prod(grid.shape)), d))
    np.add.at(g, cache.corners.reshape(-1), (cache.weights[..., None] * dout[:, None, :]).reshape(-1, d))
    return g.reshape(grid.features.shape)


# -- occupancy MLP -----------------------------------------------------------


@dataclass
class OccupancyMLP:
    """feature -> Linear(d, 32) -> ReLU -> Linear(32, 1): an occupancy logit."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, hidden: int = MLP_HIDDEN, out_bias: float = 0.0):
        return cls(rng.normal(0, np.sqrt(2.0 / d), (d, hidden)), np.zeros(hidden),
                   rng.normal(0, np.sqrt(1.0 / hidden), (hidden, 1)), np.array([out_bias]))

    @classmethod
    def identity(cls, hidden: int = MLP_HIDDEN):
        """Exact pass-through of a 1-channel feature: ``relu(f) - relu(-f) = f``."""
        w1 = np.zeros((1, hidden))
        w1[0, 0], w1[0, 1] = 1.0, -1.0
        w2 = np.zeros((hidden, 1))
        w2[0, 0], w2[1, 0] = 1.0, -1.0
        return cls(w1, np.zeros(hidden), w2, np.zeros(1))

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, f: np.ndarray):
        z = f @ self.w1 + self.b1
        a = np.maximum(z, 0.0)
        return (a @ self.w2 + self.b2)[:, 0], (f, z, a)

    def backward(self, dlogit: np.ndarray, cache):
        f, z, a = cache
        dl = dlogit[:, None]
        grads = {"w2": a.T @ dl, "b2": dl.sum(0)}
        dz = (dl @ self.w2.T) * (z > 0)
        grads["w1"] = f.T @ dz
        grads["b1"] = dz.sum(0)
        return dz @ self.w1.T, grads


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- rays and compositing ------------------------------------------------------


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    h: np.ndarray
    gt_depth: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.h = np.asarray(self.h, dtype=np.float64).reshape(-1)
        if abs(np.linalg.norm(self.direction) - 1.0) > UNIT_TOL:
            raise PreconditionError(f"ray direction must be a unit vector, |d| = {np.linalg.norm(self.direction)}")
        if np.any(np.diff(self.h) <= 0):
            raise PreconditionError("sample depths must be strictly increasing")

    def points(self, h=None) -> np.ndarray:
        h = self.h if h is None else h
        return self.origin + np.asarray(h)[:, None] * self.direction


def composite(alpha, h):
    """Return ``(D, w, transmittance)`` for occupancies ``alpha`` at depths ``h``.

    ``transmittance[i]`` is the probability mass surviving past sample ``i``;
    its last entry is the residual, so ``sum(w) + transmittance[-1] = 1``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if alpha.size == 0:
        raise EmptyRayError("cannot composite an empty sample list")
    if np.any(alpha > LOG_SPACE_ALPHA):
        # near-opaque samples: accumulate log(1 - alpha) to keep products exact-ish
        with np.errstate(divide="ignore"):
            log_after = np.cumsum(np.log1p(-alpha))
        after = np.exp(log_after)
    else:
        after = np.cumprod(1.0 - alpha)
    before = np.concatenate([[1.0], after[:-1]])
    w = alpha * before
    return float(np.sum(w * h)), w, after


def composite_backward(alpha, w, before, dw):
    """Gradient wrt ``alpha`` given ``dL/dw``, via a reverse recurrence (no divisions).

    ``R_j = dw_{j+1} alpha_{j+1} + (1 - alpha_{j+1}) R_{j+1}`` and
    ``dL/dalpha_j = T_j (dw_j - R_j)``.
    """
    n = alpha.size
    dalpha = np.empty(n)
    r = 0.0
    for j in range(n - 1, -1, -1):
        dalpha[j] = before[j] * (dw[j] - r)
        r = dw[j] * alpha[j] + (1.0 - alpha[j]) * r
    return dalpha


@dataclass
class RenderResult:
    depth: float
    weights: np.ndarray
    transmittance: float
    h: np.ndarray  # depths of the samples actually used
    alpha: np.ndarray = None
    cache: tuple = field(default=None, repr=False)


def render_depth(ray: Ray, grid: NeuralFeatureGrid, mlp: OccupancyMLP, h=None) -> RenderResult:
    """Expected depth along ``ray``; samples outside the grid extents are dropped."""
    h = ray.h if h is None else np.asarray(h, dtype=np.float64)
    pts = ray.points(h)
    keep = grid.contains(pts)
    if not keep.any():
        raise EmptyRayError(f"ray from {ray.origin.tolist()} has no samples inside the grid")
    h, pts = h[keep], pts[keep]
    feats, icache = interp(grid, pts, return_cache=True)
    logits, mcache = mlp.forward(feats)
    alpha = sigmoid(logits)
    depth, w, after = composite(alpha, h)
    return RenderResult(depth, w, float(after[-1]), h, alpha, (icache, mcache, after))


# -- loss ------------------------------------------------------------------


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy and its gradient wrt the logits."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape:
        raise PreconditionError(f"coarse logits {x.shape} and targets {y.shape} differ in shape")
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = max(1, x.size)
    return float(loss.sum() / n), (sigmoid(x) - y) / n


@dataclass
class RenderLoss:
    total: float
    depth_l1: float
    concentration: float
    bce: float
    grad_features: np.ndarray
    grad_mlp: dict
    grad_coarse: np.ndarray
    depths: np.ndarray  # rendered depth per ray (sentinel for empty rays)


def rendering_loss(rays, grid: NeuralFeatureGrid, mlp: OccupancyMLP, coarse_logits, coarse_targets,
                   epsilon: float = 0.4, *, penalty: str = "linear") -> RenderLoss:
    """Mean over rays of ``|D - D_gt| + sum_i 1(|h_i - D_gt| > eps) * pen(w_i)`` plus coarse BCE.

    ``pen`` is ``w`` (``penalty="linear"``, the norm of a scalar weight) or
    ``w**2`` (``"squared"``).  Rays with no sample inside the grid, e.g. after
    spatial skipping, render :data:`SENTINEL_DEPTH`; they are left out of the
    ray mean while the BCE term still covers their voxels.
    """
    if epsilon <= 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")
    if penalty not in ("linear", "squared"):
        raise PreconditionError(f"penalty must be 'linear' or 'squared', got {penalty!r}")
    rays = list(rays)
    if any(r.gt_depth is None for r in rays):
        raise PreconditionError("every ray needs a ground-truth depth")
    gfeat = np.zeros_like(grid.features)
    gmlp = {k: np.zeros_like(v) for k, v in mlp.params().items()}
    depths = np.full(len(rays), SENTINEL_DEPTH)
    results = []
    for i, ray in enumerate(rays):
        if ray.h.size == 0 or not grid.contains(ray.points()).any():
            continue
        res = render_depth(ray, grid, mlp)
        depths[i] = res.depth
        results.append((ray, res))
    n = max(1, len(results))
    l1 = conc = 0.0
    for ray, res in results:
        err = res.depth - ray.gt_depth
        far = np.abs(res.h - ray.gt_depth) > epsilon
        l1 += abs(err)
        if penalty == "linear":
            conc += float(np.sum(res.weights[far]))
            dpen = far.astype(np.float64)
        else:
            conc += float(np.sum(res.weights[far] ** 2))
            dpen = 2.0 * res.weights * far
        dw = (np.sign(err) * res.h + dpen) / n
        icache, mcache, after = res.cache
        before = np.concatenate([[1.0], after[:-1]])
        dalpha = composite_backward(res.alpha, res.weights, before, dw)
        dlogit = dalpha * res.alpha * (1.0 - res.alpha)
        dfeat, g = mlp.backward(dlogit, mcache)
        for k in gmlp:
            gmlp[k] += g[k]
        gfeat += interp_backward(grid, icache, dfeat)
    bce, gcoarse = bce_with_logits(coarse_logits, coarse_targets)
    l1 /= n
    conc /= n
    return RenderLoss(l1 + conc + bce, l1, conc, bce, gfeat, gmlp, gcoarse, depths)


# -- spatial skipping ------------------------------------------------------------


@dataclass
class SkipVolume:
    fine: np.ndarray  # (X, Y, Z) bool occupancy
    pooled: np.ndarray  # (ceil(X/fx), ceil(Y/fy), ceil(Z/fz)) bool
    lo: np.ndarray
    voxel: np.ndarray  # fine voxel edge lengths
    factor: tuple

    @property
    def cell(self) -> np.ndarray:
        return self.voxel * np.array(self.factor)

    def cell_bounds(self, index) -> tuple[np.ndarray, np.ndarray]:
        a = self.lo + np.asarray(index) * self.cell
        return a, a + self.cell


def voxelize(points, lo, hi, shape) -> np.ndarray:
    """Boolean fine occupancy of ``shape`` voxels spanning ``[lo, hi]``; outside points are dropped."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    dims = np.array(shape)
    occ = np.zeros(shape, dtype=bool)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = p[np.all((p >= lo) & (p <= hi), axis=1)]
    if len(p):
        idx = np.minimum(np.floor((p - lo) / (hi - lo) * dims).astype(np.int64), dims - 1)
        occ[tuple(idx.T)] = True
    return occ


def max_pool(mask: np.ndarray, factor) -> np.ndarray:
    """Max-pool a boolean volume, zero-padding each axis up to a multiple of its factor."""
    f = tuple(int(x) for x in factor)
    pad = [(0, (-s) % k) for s, k in zip(mask.shape, f)]
    m = np.pad(mask, pad)
    X, Y, Z = (s // k for s, k in zip(m.shape, f))
    return m.reshape(X, f[0], Y, f[1], Z, f[2]).any(axis=(1, 3, 5))


def build_skip_volume(lo, hi, shape, *, points=None, logits=None, threshold: float = 0.5,
                      factor=(8, 8, 1)) -> SkipVolume:
    """Fine occupancy from ``points`` (training) or thresholded ``logits`` (inference), then max-pool.

    The default factor pools 8x in the two ground-plane axes only.
    """
    if (points is None) == (logits is None):
        raise PreconditionError("give exactly one of points or logits")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if points is not None:
        fine = voxelize(points, lo, hi, shape)
    else:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != tuple(shape):
            raise PreconditionError(f"logits {logits.shape} do not match lattice {tuple(shape)}")
        fine = sigmoid(logits) >= threshold
    voxel = (hi - lo) / np.array(shape)
    if np.isscalar(factor):
        factor = (factor,) * 3
    factor = tuple(int(x) for x in factor)
    return SkipVolume(fine, max_pool(fine, factor), lo, voxel, factor)


def ray_box(origin, direction, lo, hi):
    """Slab test; returns (t_enter, t_exit) arrays for boxes ``lo``/``hi`` of shape (n, 3)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    para = d == 0
    inside = (o >= lo) & (o <= hi)
    t_lo = np.where(para, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(para, np.where(inside, np.inf, -np.inf), t_hi)
    return t_lo.max(axis=-1), t_hi.min(axis=-1)


def occupied_intervals(ray: Ray, skip: SkipVolume, near: float = 0.0, far: float = np.inf) -> list:
    """Merged depth intervals where the ray crosses set pooled cells, clipped to [near, far]."""
    idx = np.argwhere(skip.pooled)
    if len(idx) == 0:
        return []
    lo = skip.lo + idx * skip.cell
    t0, t1 = ray_box(ray.origin, ray.direction, lo, lo + skip.cell)
    t0 = np.maximum(t0, near)
    t1 = np.minimum(t1, far)
    hit = t1 > t0
    spans = sorted(zip(t0[hit], t1[hit]))
    merged = []
    for a, b in spans:
        if merged and a <= merged[-1][1] + 1e-12:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(float(a), float(b)) for a, b in merged]


def uniform_samples(a: float, b: float, n: int) -> np.ndarray:
    """``n`` bin midpoints of ``[a, b]``."""
    return a + (np.arange(n) + 0.5) * (b - a) / n


def skip_samples(ray: Ray, skip: SkipVolume, n_per_interval: int, near: float = 0.0,
                 far: float = np.inf) -> np.ndarray:
    """Sample depths only inside occupied pooled cells; empty when none are crossed."""
    parts = [uniform_samples(a, b, n_per_interval) for a, b in occupied_intervals(ray, skip, near, far)]
    if not parts:
        return np.empty(0)
    h = np.concatenate(parts)
    return np.unique(h)


def dense_samples(ray: Ray, lo, hi, n: int, near: float = 0.0) -> np.ndarray:
    """``n`` uniform samples over the ray's span inside the box ``[lo, hi]``."""
    t0, t1 = ray_box(ray.origin, ray.direction, np.asarray(lo)[None], np.asarray(hi)[None])
    a, b = max(float(t0[0]), near), float(t1[0])
    if b <= a:
        return np.empty(0)
    return uniform_samples(a, b, n)


def render_skipped(ray: Ray, grid: NeuralFeatureGrid, mlp: OccupancyMLP, skip: SkipVolume,
                   n_per_interval: int, near: float = 0.0) -> float:
    h = skip_samples(ray, skip, n_per_interval, near)
    if h.size == 0:
        return SENTINEL_DEPTH
    return render_depth(ray, grid, mlp, h).depth
