"""Parallel decode-and-denoise sampling with confidence ordering and guidance.

Token grids are flat integer arrays of length ``N`` whose values lie in
``[0, m]`` with ``m`` the mask id.  Every function accepts an optional leading
batch axis, so several independent trajectories can be decoded in lock-step;
randomness is drawn from a single generator in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import DenoiserFailure, PreconditionError
from .schedules import ceil_count, cosine_mask_fraction

# Stands in for +inf in confidence sorting (keeps the order total, no NaNs).
COMMITTED = np.finfo(np.float64).max
_U_CLAMP = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 10
    guidance_w: float = 0.0
    top_k_logits: int = 3
    seed: int = 0
    # "full": log-prob under the full (guided) softmax; "topk": under the top-k renormalized one
    confidence: str = "full"
    # False reproduces vanilla MaskGIT: committed tokens keep their value
    denoise: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise PreconditionError(f"K must be >= 1, got {self.K}")
        if self.top_k_logits < 1:
            raise PreconditionError(f"top_k_logits must be >= 1, got {self.top_k_logits}")
        if self.guidance_w < 0:
            raise PreconditionError(f"guidance weight must be >= 0, got {self.guidance_w}")
        if self.confidence not in ("full", "topk"):
            raise PreconditionError(f"confidence must be 'full' or 'topk', got {self.confidence!r}")


@dataclass(frozen=True)
class Context:
    """Decoded history ``c^(t-1)`` for predicting the next frame.

    ``frames`` has shape ``(..., t, N)``; ``actions`` has shape ``(..., t + 1, 16)``
    and holds the poses of the context frames followed by the pose of the
    frame being predicted.
    """

    frames: np.ndarray
    actions: np.ndarray

    @property
    def length(self) -> int:
        return self.frames.shape[-2]


class Denoiser(Protocol):
    m: int
    max_frames: int

    def __call__(self, x: np.ndarray, context: Context, *, conditional: bool = True) -> np.ndarray:
        """Logits of shape ``(..., N, m)`` for the partially decoded frame ``x``."""


def cfg_combine(cond: np.ndarray, uncond: np.ndarray, w: float) -> np.ndarray:
    """``cond + w * (cond - uncond)``."""
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise PreconditionError(f"logit shapes differ: {cond.shape} vs {uncond.shape}")
    if w == 0:
        return cond
    return cond + w * (cond - uncond)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    top = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - top
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _check_logits(logits: np.ndarray):
    if np.any(np.isnan(logits)) or np.any(np.isposinf(logits)):
        raise PreconditionError("logits must not contain NaN or +inf")
    if np.any(np.all(np.isneginf(logits), axis=-1)):
        raise PreconditionError("a position has every logit at -inf")


def top_k_indices(logits: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` largest logits per position, ties to the lower id."""
    return np.argsort(-logits, axis=-1, kind="stable")[..., :top_k]


def sample_x0(logits: np.ndarray, top_k: int, rng: np.random.Generator,
              return_topk_logp: bool = False):
    """Sample one real token per position from the top-k renormalized softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_logits(logits)
    m = logits.shape[-1]
    if not 1 <= top_k <= m:
        raise PreconditionError(f"top_k={top_k} must lie in [1, {m}]")
    idx = top_k_indices(logits, top_k)
    sub = np.take_along_axis(logits, idx, axis=-1)
    lp = log_softmax(sub)
    probs = np.exp(lp)
    u = rng.random(logits.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    choice = np.sum(cdf < u[..., None] * cdf[..., -1:], axis=-1)
    choice = np.minimum(choice, top_k - 1)
    tokens = np.take_along_axis(idx, choice[..., None], axis=-1)[..., 0]
    if return_topk_logp:
        return tokens, np.take_along_axis(lp, choice[..., None], axis=-1)[..., 0]
    return tokens


def gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def decode_step(x_next: np.ndarray, x0_pred: np.ndarray, logp: np.ndarray, k: int, K: int,
                m: int, rng: np.random.Generator, *,
                gamma: Callable[[float], float] = cosine_mask_fraction,
                denoise: bool = True) -> np.ndarray:
    """One reverse step ``x_{k+1} -> x_k``.

    Confidence is ``logp + Gumbel * k/K``; positions already decoded in
    ``x_next`` are pinned to the top so they never return to the mask.  The
    ``ceil(gamma(k/K) N)`` most confident positions take the value of
    ``x0_pred`` (or, with ``denoise=False``, keep their committed value) and
    every other position is masked.
    """
    x_next = np.asarray(x_next)
    x0_pred = np.asarray(x0_pred)
    if np.any(x0_pred >= m):
        raise PreconditionError("predicted x0 must not contain mask tokens")
    n = x_next.shape[-1]
    keep = ceil_count(gamma(k / K), n)
    if keep > n:
        raise PreconditionError(f"keep count {keep} exceeds N={n}")
    scale = k / K
    conf = np.asarray(logp, dtype=np.float64)
    if scale > 0:
        conf = conf + gumbel(conf.shape, rng) * scale
    decoded = x_next != m
    conf = np.where(decoded, COMMITTED, conf)
    # never drop a committed position, whatever the schedule says
    keep = np.maximum(keep, decoded.sum(axis=-1))
    order = np.argsort(-conf, axis=-1, kind="stable")
    ranks = np.argsort(order, axis=-1)
    selected = ranks < np.asarray(keep)[..., None]
    values = x0_pred if denoise else np.where(decoded, x_next, x0_pred)
    return np.where(selected, values, m)


def _guided_logits(denoiser, x, context, w):
    if w == 0:
        return denoiser(x, context, conditional=True)
    guided = getattr(denoiser, "guided", None)
    if guided is not None:
        cond, uncond = guided(x, context)
    else:
        cond = denoiser(x, context, conditional=True)
        uncond = denoiser(x, context, conditional=False)
    return cfg_combine(cond, uncond, w)


def sample_frame(denoiser: Denoiser, context: Context, config: SamplerConfig,
                 rng: np.random.Generator, *, n_tokens: int | None = None,
                 gamma: Callable[[float], float] = cosine_mask_fraction,
                 trace: list | None = None) -> np.ndarray:
    """Decode one frame from all-mask in ``config.K`` steps.

    With ``trace`` given, every intermediate ``x_k`` (from ``x_K`` down to
    ``x_0``) is appended to it.
    """
    m = denoiser.m
    if n_tokens is None:
        n_tokens = context.frames.shape[-1]
    batch = context.frames.shape[:-2]
    x = np.full(batch + (n_tokens,), m, dtype=np.int64)
    if trace is not None:
        trace.append(x.copy())
    K = config.K
    for k in range(K - 1, -1, -1):
        try:
            logits = _guided_logits(denoiser, x, context, config.guidance_w)
        except Exception as exc:  # noqa: BLE001 - re-raised with the step attached
            raise DenoiserFailure(k, exc) from exc
        x0, topk_logp = sample_x0(logits, config.top_k_logits, rng, return_topk_logp=True)
        if config.confidence == "full":
            logp = np.take_along_axis(log_softmax(logits), x0[..., None], axis=-1)[..., 0]
        else:
            logp = topk_logp
        x = decode_step(x, x0, logp, k, K, m, rng, gamma=gamma, denoise=config.denoise)
        if trace is not None:
            trace.append(x.copy())
    return x


@dataclass
class Rollout:
    frames: np.ndarray  # (..., t0 + horizon, N), context followed by predictions
    actions: np.ndarray  # (..., t0 + horizon, 16)
    n_context: int
    predicted: list = field(default_factory=list)


def rollout(denoiser: Denoiser, past_frames: np.ndarray, past_actions: np.ndarray,
            future_actions: np.ndarray, horizon: int, config: SamplerConfig,
            rng: np.random.Generator, **kw) -> Rollout:
    """Predict ``horizon`` frames one at a time, feeding each back as context.

    ``past_frames`` is ``(..., t0, N)``, ``past_actions`` ``(..., t0, 16)`` and
    ``future_actions`` ``(..., horizon, 16)``: the pose of each predicted frame.
    """
    if horizon < 1:
        raise PreconditionError(f"horizon must be >= 1, got {horizon}")
    future_actions = np.asarray(future_actions, dtype=np.float64)
    if future_actions.shape[-2] < horizon:
        raise PreconditionError(f"{future_actions.shape[-2]} actions supplied for horizon {horizon}")
    t0 = past_frames.shape[-2]
    limit = getattr(denoiser, "max_frames", None)
    if limit is not None and t0 + horizon > limit:
        raise PreconditionError(
            f"context of {t0 + horizon - 1} frames plus the predicted one exceeds the denoiser limit {limit}")
    frames = np.asarray(past_frames, dtype=np.int64)
    actions = np.asarray(past_actions, dtype=np.float64)
    out = Rollout(frames, actions, t0)
    for h in range(horizon):
        nxt_action = future_actions[..., h : h + 1, :]
        ctx = Context(frames, np.concatenate([actions, nxt_action], axis=-2))
        frame = sample_frame(denoiser, ctx, config, rng, **kw)
        out.predicted.append(frame)
        frames = np.concatenate([frames, frame[..., None, :]], axis=-2)
        actions = ctx.actions
    out.frames = frames
    out.actions = actions
    return out
