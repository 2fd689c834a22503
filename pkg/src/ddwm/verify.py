"""Oracle suite behind ``ddwm verify``.

Every check compares an implementation against an independent oracle
(explicit matrix products, enumeration, finite differences, a ground-truth
denoiser) and reports the worst deviation next to its tolerance.  A mutation
can be injected to confirm that the matching check notices it.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from . import diffusion_math as dm
from .corruption import build_temporal_mask
from .denoiser.model import DenoiserInput, ModelConfig, ToyDenoiser
from .diffusion_math import TabularDenoiser, Vocabulary
from .quantizer import vq_loss
from .render import (NeuralFeatureGrid, OccupancyMLP, Ray, build_skip_volume, dense_samples, render_depth,
                     render_skipped, rendering_loss)
from .sampler import Context, SamplerConfig, cfg_combine, sample_frame
from .schedules import NoiseSchedule

MUTATIONS = ("cumulative-sign",)


@dataclass
class Check:
    name: str
    tolerance: float
    deviation: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""


# -- helpers ---------------------------------------------------------------


def random_schedule(rng: np.random.Generator, k_max: int) -> NoiseSchedule:
    """Rates with ``alpha_k + beta_k <= 1`` drawn at random."""
    alpha = rng.random(k_max)
    beta = rng.random(k_max) * (1.0 - alpha)
    return NoiseSchedule(alpha, beta)


def dense_step(alpha: float, beta: float, m: int) -> np.ndarray:
    """``Q^a Q^u`` built entry by entry from the mixing definitions."""
    eye = np.eye(m + 1)
    absorb = (1 - alpha) * eye
    absorb[:, m] += alpha
    mix = np.zeros((m + 1, m + 1))
    mix[:m, :m] = 1.0 / m
    mix[m, m] = 1.0
    uniform = (1 - beta) * eye + beta * mix
    return absorb @ uniform


def _cumulative_entries(schedule, k, vocab):
    return dm.cumulative(schedule, k, vocab).entries


def _cumulative_sign_flipped(schedule, k, vocab):
    # the uniform leak enters with the wrong sign
    m = vocab.m
    survive = schedule.alpha_bar(k)
    omega = survive * schedule.beta_keep(k)
    nu = (omega - survive) / m
    q = np.full((m + 1, m + 1), nu)
    q[np.arange(m), np.arange(m)] += omega
    q[:m, m] = 1.0 - survive
    q[m, :] = 0.0
    q[m, m] = 1.0
    return q


_impl = {"cumulative": _cumulative_entries}


@contextmanager
def mutation(name: str | None):
    if name is None:
        yield
        return
    if name != "cumulative-sign":
        raise ValueError(f"unknown mutation {name!r}; known: {', '.join(MUTATIONS)}")
    saved = dict(_impl)
    _impl["cumulative"] = _cumulative_sign_flipped
    try:
        yield
    finally:
        _impl.update(saved)


def max_rel_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> tuple[float, str]:
    worst, where = 0.0, ""
    for name, a in analytic.items():
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            where = f"{name}{np.unravel_index(rel.argmax(), rel.shape)}"
    return worst, where


def central_differences(loss, params: dict, h: float = 1e-5) -> dict:
    """``d loss / d p`` for every entry of every array in ``params`` (perturbed in place)."""
    out = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


# -- pinned instances ------------------------------------------------------


def denoiser_instance(seed: int = 0, layers=("spatial", "temporal", "conv")):
    """4x4 grid, m=3, T=2, float64, weights perturbed off their init."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(m=3, rows=4, cols=4, d=6, hidden=8, max_frames=3, layers=tuple(layers),
                      zero_init_head=False)
    model = ToyDenoiser.init(cfg, rng)
    for k in model.params:
        model.params[k] += rng.normal(0, 0.1, model.params[k].shape)
    frames = rng.integers(0, 4, (2, 2, 16))
    targets = rng.integers(0, 3, (2, 2, 16))
    mask = rng.random((2, 2, 16)) < 0.7
    inp = DenoiserInput(frames, rng.normal(size=(2, 2, 16)), build_temporal_mask(2, "causal"))
    return model, inp, targets, mask


def render_instance(seed: int = 0):
    """4x4x4x2 grid over [0, 3]^3, three rays of eight samples, default-width MLP."""
    rng = np.random.default_rng(seed)
    grid = NeuralFeatureGrid(rng.normal(0, 1, (4, 4, 4, 2)), np.zeros(3), np.full(3, 3.0))
    mlp = OccupancyMLP.init(2, rng)
    mlp.b1 += rng.normal(0, 0.3, mlp.b1.shape)
    rays = []
    for _ in range(3):
        origin = rng.uniform(0.3, 0.7, 3)
        d = rng.uniform(0.4, 1.0, 3)
        d /= np.linalg.norm(d)
        h = np.sort(rng.uniform(0.05, 2.2, 8))
        rays.append(Ray(origin, d, h, gt_depth=float(rng.uniform(0.5, 2.0))))
    coarse = rng.normal(size=(2, 2, 2))
    targets = (rng.random((2, 2, 2)) < 0.5).astype(float)
    return grid, mlp, rays, coarse, targets


def sphere_scene(seed: int = 0, n_surface: int = 20000):
    """Occupancy sphere of radius 4 centred in a 16 m cube; skip volume from points on its surface.

    The single feature channel holds ``50 (R - |x - c|)`` and the identity MLP
    passes it through as the occupancy logit.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.zeros(3), np.full(3, 16.0)
    centre, radius = np.full(3, 8.0), 4.0
    ax = np.linspace(0.0, 16.0, 33)
    nodes = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1)
    dist = np.linalg.norm(nodes - centre, axis=-1)
    grid = NeuralFeatureGrid((50.0 * (radius - dist))[..., None], lo, hi)
    u = rng.normal(size=(n_surface, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    skip = build_skip_volume(lo, hi, (32, 32, 32), points=centre + radius * u)
    return grid, OccupancyMLP.identity(), skip, centre


def skip_vs_dense(seed: int = 0, n_rays: int = 64, n_dense: int = 4000, n_per_interval: int = 128):
    """Largest |skipped - dense| rendered depth over rays aimed near the sphere, and the voxel diagonal."""
    grid, mlp, skip, centre = sphere_scene(seed)
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(n_rays):
        origin = np.array([1.0, *rng.uniform(5.0, 11.0, 2)])
        d = centre + rng.uniform(-2.0, 2.0, 3) - origin
        ray = Ray(origin, d / np.linalg.norm(d), [0.0])
        dense = render_depth(ray, grid, mlp, dense_samples(ray, grid.lo, grid.hi, n_dense)).depth
        worst = max(worst, abs(render_skipped(ray, grid, mlp, skip, n_per_interval) - dense))
    return worst, float(np.linalg.norm(skip.voxel))


class OracleDenoiser:
    """Puts all mass on the ground truth: log-prob of the true token is ~0."""

    def __init__(self, truth: np.ndarray, m: int, max_frames: int = 64):
        self.truth = np.asarray(truth)
        self.m = m
        self.max_frames = max_frames

    def __call__(self, x, context, *, conditional=True):
        logits = np.full(self.truth.shape + (self.m,), -1e4)
        np.put_along_axis(logits, self.truth[..., None], 0.0, axis=-1)
        return logits


# -- checks -----------------------------------------------------------------


def check_cumulative(n_schedules: int = 100, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_schedules):
        k_max = int(rng.integers(1, 11))
        m = int(rng.integers(1, 9))
        sched = random_schedule(rng, k_max)
        vocab = Vocabulary(m)
        prod = np.eye(m + 1)
        for k in range(1, k_max + 1):
            prod = prod @ dense_step(sched.alpha[k - 1], sched.beta[k - 1], m)
            worst = max(worst, float(np.abs(_impl["cumulative"](sched, k, vocab) - prod).max()))
    return Check("kernel.cumulative_vs_product", 1e-12, worst, worst <= 1e-12)


def check_commutation(n: int = 100, seed: int = 1) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(1, 9))
        a = float(rng.random())
        b = float(rng.random() * (1 - a))
        vocab = Vocabulary(m)
        qa = dm.absorbing_step(a, vocab).entries
        qu = dm.uniform_step(b, vocab).entries
        worst = max(worst, float(np.abs(qa @ qu - qu @ qa).max()),
                    float(np.abs(dm.combined_step(a, b, vocab).entries - qa @ qu).max()))
    return Check("kernel.commutation", 1e-14, worst, worst <= 1e-14)


def check_posterior(seed: int = 2) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for m in range(1, 5):
        vocab = Vocabulary(m)
        for k_max in (1, 2, 3):
            sched = random_schedule(rng, k_max)
            for k in range(1, k_max + 1):
                prev = dm.cumulative(sched, k - 1, vocab).entries
                one = dm.step(sched, k, vocab).entries
                cum = dm.cumulative(sched, k, vocab).entries
                for x0 in range(m):
                    for xk in range(m + 1):
                        if cum[x0, xk] <= 0:
                            continue
                        oracle = np.array([prev[x0, j] * one[j, xk] for j in range(m + 1)]) / cum[x0, xk]
                        got = dm.posterior(xk, x0, sched, k, vocab)
                        worst = max(worst, float(np.abs(got - oracle).max()))
    return Check("posterior.enumeration", 1e-12, worst, worst <= 1e-12)


def check_elbo(n_models: int = 100, seed: int = 3) -> Check:
    """Bound minus exact likelihood must not exceed the slack; reports the largest excess."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n_models):
        m = int(rng.integers(1, 4))
        k_max = int(rng.integers(1, 4))
        alpha = rng.uniform(0.05, 0.9, k_max)
        beta = rng.uniform(0.01, 1.0, k_max) * (1 - alpha)
        sched = NoiseSchedule(alpha, beta)
        model = TabularDenoiser.random(rng, m, k_max)
        data = rng.dirichlet(np.ones(m))
        gap = dm.elbo_bound(model, sched, data) - dm.expected_log_likelihood(model, sched, data)
        worst = max(worst, float(gap))
    return Check("elbo.inequality", 1e-10, worst, worst <= 1e-10, detail="deviation = max(bound - loglik)")


def check_bound_constant(seed: int = 4) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for m in (1, 2, 3):
        for k_max in (1, 2, 3):
            alpha = rng.uniform(0.05, 0.9, k_max)
            beta = rng.uniform(0.01, 1.0, k_max) * (1 - alpha)
            sched = NoiseSchedule(alpha, beta)
            data = rng.dirichlet(np.ones(m))
            vocab = Vocabulary(m)
            worst = max(worst, abs(dm.bound_constant(sched, vocab, data)
                                   - dm.bound_constant_by_paths(sched, vocab, data)))
    return Check("elbo.constant_by_paths", 1e-10, worst, worst <= 1e-10)


def check_denoiser_gradients(seed: int = 0) -> Check:
    model, inp, targets, mask = denoiser_instance(seed)
    _, grads = model.loss_and_gradients(inp, targets, mask)
    fd = central_differences(lambda: model.loss_and_gradients(inp, targets, mask, need_grad=False)[0],
                             model.params)
    worst, where = max_rel_error(grads, fd)
    return Check("grad.denoiser", 1e-4, worst, worst <= 1e-4, detail=where)


def check_render_gradients(seed: int = 0) -> Check:
    grid, mlp, rays, coarse, targets = render_instance(seed)
    res = rendering_loss(rays, grid, mlp, coarse, targets)
    params = {"features": grid.features, **mlp.params(), "coarse": coarse}
    analytic = {"features": res.grad_features, **res.grad_mlp, "coarse": res.grad_coarse}
    fd = central_differences(lambda: rendering_loss(rays, grid, mlp, coarse, targets).total, params, h=1e-4)
    worst, where = max_rel_error(analytic, fd)
    return Check("grad.render", 1e-4, worst, worst <= 1e-4, detail=where)


def check_vq_gradients(seed: int = 5) -> Check:
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(5, 3))
    zq = rng.normal(size=(5, 3))
    _, g_codes, g_z = vq_loss(z, zq)
    # each routed gradient is the derivative of its own term only
    fd_codes = central_differences(lambda: 0.25 * float(np.sum((z - zq) ** 2)), {"zq": zq})["zq"]
    fd_z = central_differences(lambda: 1.0 * float(np.sum((zq - z) ** 2)), {"z": z})["z"]
    worst, where = max_rel_error({"codes": g_codes, "z": g_z}, {"codes": fd_codes, "z": fd_z})
    return Check("grad.vq_routing", 1e-4, worst, worst <= 1e-4, detail=where)


def check_sampler_roundtrip(seed: int = 6) -> Check:
    """Count of mismatched tokens plus no-remask violations over all traces."""
    rng = np.random.default_rng(seed)
    bad = 0
    for K in (1, 4, 10, 16):
        for side in (1, 4, 16):
            m = 5
            truth = rng.integers(0, m, (2, side * side))
            den = OracleDenoiser(truth, m)
            ctx = Context(np.zeros((2, 1, side * side), np.int64), np.zeros((2, 2, 16)))
            trace = []
            x = sample_frame(den, ctx, SamplerConfig(K=K, guidance_w=0.0), rng, trace=trace)
            bad += int(np.sum(x != truth))
            for a, b in zip(trace, trace[1:]):
                bad += int(np.sum((a != m) & (b == m)))
    return Check("sampler.roundtrip", 0.0, float(bad), bad == 0, detail="mismatches + remask events")


def check_cfg(seed: int = 7) -> Check:
    rng = np.random.default_rng(seed)
    dev = abs(cfg_combine([2.0, 0.0], [1.0, 0.0], 1.0) - np.array([3.0, 0.0])).max()
    dev = max(dev, abs(cfg_combine([2.0, 0.0], [1.0, 0.0], 2.0) - np.array([4.0, 0.0])).max())
    for _ in range(50):
        c = rng.normal(size=(4, 6))
        u = rng.normal(size=(4, 6))
        dev = max(dev, abs(cfg_combine(c, u, 0.0) - c).max())
        dev = max(dev, abs(cfg_combine(c, c, float(rng.uniform(0, 10))) - c).max())
    return Check("sampler.cfg_identities", 0.0, float(dev), dev == 0.0)


CHECKS = (check_cumulative, check_commutation, check_posterior, check_elbo, check_bound_constant,
          check_denoiser_gradients, check_render_gradients, check_vq_gradients,
          check_sampler_roundtrip, check_cfg)


def run_checks(mutate: str | None = None) -> dict:
    checks = []
    with mutation(mutate):
        for fn in CHECKS:
            t = time.perf_counter()
            try:
                c = fn()
            except Exception as exc:  # noqa: BLE001 - a crash is a failed check
                c = Check(fn.__name__.removeprefix("check_"), float("nan"), float("inf"), False,
                          detail=repr(exc))
            c.seconds = round(time.perf_counter() - t, 3)
            c.passed = bool(c.passed)
            c.deviation = float(c.deviation)
            checks.append(c)
    return {"passed": all(c.passed for c in checks), "mutation": mutate,
            "checks": [asdict(c) for c in checks]}
