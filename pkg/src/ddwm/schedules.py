"""Mask schedule and per-step absorbing/uniform noise rates.

Two different curves live here and are deliberately kept independent:

* ``cosine_mask_fraction`` is the MaskGIT mask schedule ``gamma(u) = cos(u*pi/2)``
  used by training-time corruption and by the sampler keep-count.
* ``absorbing_schedule`` / ``uniform_schedule`` produce the per-step rates of the
  equivalent absorbing-uniform forward process, used by the kernel algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

# Slack used before ``ceil`` so that cos(pi/3) * 100 = 50.000000000000014 counts as 50.
_CEIL_SLACK = 1e-9


def cosine_mask_fraction(u: float) -> float:
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"mask schedule argument must lie in [0, 1], got {u}")
    if u == 1.0:
        return 0.0
    return math.cos(u * math.pi / 2.0)


MASK_SCHEDULES = {"cosine": cosine_mask_fraction}


def get_mask_schedule(name: str):
    try:
        return MASK_SCHEDULES[name]
    except KeyError:
        raise DomainError(f"unknown mask schedule {name!r}; known: {sorted(MASK_SCHEDULES)}") from None


def ceil_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` robust to last-bit roundoff, clipped to ``[0, n]``."""
    return min(n, max(0, math.ceil(fraction * n - _CEIL_SLACK)))


def uniform_schedule(k_max: int, eta: float) -> np.ndarray:
    """Uniform-noise rates ``beta_k = 1 / (K/eta - k + 1)`` for ``k = 1..K``.

    With these rates ``1 - prod_{s<=k}(1 - beta_s) = eta * k / K``, i.e. the
    noised fraction of unmasked tokens grows linearly up to ``eta``.
    """
    if k_max < 1:
        raise DomainError(f"K must be >= 1, got {k_max}")
    if not 0.0 < eta <= 1.0:
        raise DomainError(f"eta is a fraction in (0, 1], got {eta}")
    k = np.arange(1, k_max + 1, dtype=np.float64)
    return 1.0 / (k_max / eta - k + 1.0)


def absorbing_schedule(k_max: int) -> np.ndarray:
    """Absorbing rates whose survival products follow ``cos(k/K * pi/2)``."""
    if k_max < 1:
        raise DomainError(f"K must be >= 1, got {k_max}")
    surv = np.cos(np.arange(k_max + 1, dtype=np.float64) / k_max * (math.pi / 2.0))
    surv[0] = 1.0
    surv[-1] = 0.0  # cos(pi/2) is 6e-17 in floating point; the last step absorbs everything
    # surv[k-1] > 0 for every k <= K, so the division is safe.
    return 1.0 - surv[1:] / surv[:-1]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step rates of an absorbing-uniform forward process.

    ``alpha[k-1]`` is the probability of absorbing into the mask at step ``k``
    and ``beta[k-1]`` the probability that a surviving (unmasked) token is
    redrawn uniformly over the ``m`` real codes at that step.
    """

    alpha: np.ndarray
    beta: np.ndarray
    eta: float = 0.0
    mask_schedule: str = "cosine"
    _survival: np.ndarray = field(init=False, repr=False, compare=False)
    _keep: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64).reshape(-1)
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if alpha.shape != beta.shape or alpha.size == 0:
            raise DomainError("alpha and beta must be non-empty and of equal length")
        for name, rates in (("alpha", alpha), ("beta", beta)):
            if np.any(~np.isfinite(rates)) or np.any(rates < 0.0) or np.any(rates > 1.0):
                raise DomainError(f"{name} rates must lie in [0, 1]: {rates}")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        survival = np.concatenate([[1.0], np.cumprod(1.0 - alpha)])
        keep = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        survival.setflags(write=False)
        keep.setflags(write=False)
        object.__setattr__(self, "_survival", survival)
        object.__setattr__(self, "_keep", keep)

    @property
    def k_max(self) -> int:
        return int(self.alpha.size)

    def alpha_bar(self, k: int) -> float:
        """``prod_{s<=k} (1 - alpha_s)``; ``alpha_bar(0) == 1``."""
        return float(self._survival[k])

    def beta_keep(self, k: int) -> float:
        """``prod_{s<=k} (1 - beta_s)``; the un-noised share of surviving tokens."""
        return float(self._keep[k])

    def to_config(self) -> dict:
        return {"K": self.k_max, "eta": self.eta, "mask_schedule": self.mask_schedule}

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return make_schedule(int(cfg["K"]), float(cfg["eta"]), cfg.get("mask_schedule", "cosine"))


def make_schedule(k_max: int, eta: float, mask_schedule: str = "cosine") -> NoiseSchedule:
    get_mask_schedule(mask_schedule)
    beta = uniform_schedule(k_max, eta) if eta > 0 else np.zeros(k_max)
    return NoiseSchedule(absorbing_schedule(k_max), beta, eta=eta, mask_schedule=mask_schedule)
