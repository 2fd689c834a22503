"""Training-time corruption, the objective mixture and temporal attention masks."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import PreconditionError
from .schedules import ceil_count, cosine_mask_fraction


@dataclass(frozen=True)
class CorruptionSample:
    corrupted: np.ndarray
    mask_positions: np.ndarray
    noise_positions: np.ndarray
    u0: float
    u1: float


def mask_count(gamma: Callable[[float], float], u0: float, n: int) -> int:
    return ceil_count(gamma(u0), n)


def noise_count(u1: float, eta: float, remaining: int) -> int:
    # Python's round() is half-to-even
    return int(round(u1 * eta * remaining))


def corrupt(x0: np.ndarray, m: int, rng: np.random.Generator, *, eta: float = 0.2,
            gamma: Callable[[float], float] = cosine_mask_fraction,
            u0: float | None = None, u1: float | None = None) -> CorruptionSample:
    """Mask ``ceil(gamma(u0) N)`` tokens, then redraw ``round(u1 * eta * R)`` of the ``R`` survivors.

    ``u0`` and ``u1`` are drawn from ``rng`` unless given.  Redrawn values are
    uniform over the ``m`` real codes and may coincide with the original.
    """
    x0 = np.asarray(x0)
    flat = x0.reshape(-1)
    if np.any(flat >= m) or np.any(flat < 0):
        raise PreconditionError("x0 must be fully decoded (no mask tokens, ids in [0, m))")
    n = flat.size
    if u0 is None:
        u0 = float(rng.random())
    if u1 is None:
        u1 = float(rng.random())
    n_mask = mask_count(gamma, u0, n)
    order = rng.permutation(n)
    mask_pos = np.sort(order[:n_mask])
    rest = order[n_mask:]
    n_noise = noise_count(u1, eta, rest.size)
    noise_pos = np.sort(rng.choice(rest, size=n_noise, replace=False)) if n_noise else np.empty(0, np.int64)
    out = flat.copy()
    out[mask_pos] = m
    if n_noise:
        out[noise_pos] = rng.integers(0, m, size=n_noise)
    return CorruptionSample(out.reshape(x0.shape), mask_pos, noise_pos, u0, u1)


class ObjectiveKind(str, Enum):
    FUTURE_ONLY = "future_only"
    JOINT = "joint_past_future"
    PER_FRAME = "per_frame_unconditional"


OBJECTIVE_WEIGHTS = {
    ObjectiveKind.FUTURE_ONLY: 0.5,
    ObjectiveKind.JOINT: 0.4,
    ObjectiveKind.PER_FRAME: 0.1,
}


@dataclass(frozen=True)
class ObjectiveMode:
    kind: ObjectiveKind
    weights: tuple = tuple(OBJECTIVE_WEIGHTS.values())


def sample_objective(rng: np.random.Generator, weights=None) -> ObjectiveMode:
    """Draw an objective: future-only 50%, joint 40%, per-frame 10% by default."""
    kinds = list(OBJECTIVE_WEIGHTS)
    w = tuple(OBJECTIVE_WEIGHTS.values()) if weights is None else tuple(float(x) for x in weights)
    if len(w) != 3 or abs(sum(w) - 1.0) > 1e-12 or min(w) < 0:
        raise PreconditionError(f"objective weights must be 3 non-negative numbers summing to 1, got {w}")
    u = float(rng.random())
    acc = 0.0
    for kind, wi in zip(kinds, w):
        acc += wi
        if u < acc:
            return ObjectiveMode(kind, w)
    return ObjectiveMode(kinds[-1], w)


@dataclass(frozen=True)
class TemporalMask:
    """Boolean attention pattern: ``matrix[t, s]`` is True when frame ``t`` may read frame ``s``."""

    matrix: np.ndarray
    mode: str

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=bool)
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def build_temporal_mask(T: int, mode: str) -> TemporalMask:
    """``causal`` / ``identity`` masks of size T, or ``cfg_extended`` of size T + 1.

    The extended mask keeps causal attention over the first ``T`` frames and
    lets the appended frame attend only to itself, which turns it into an
    unconditional copy of the frame being generated.
    """
    if T < 1:
        raise PreconditionError(f"need at least one frame, got T={T}")
    if mode == "causal":
        mat = np.tril(np.ones((T, T), dtype=bool))
    elif mode == "identity":
        mat = np.eye(T, dtype=bool)
    elif mode == "cfg_extended":
        mat = np.zeros((T + 1, T + 1), dtype=bool)
        mat[:T, :T] = np.tril(np.ones((T, T), dtype=bool))
        mat[T, T] = True
    else:
        raise PreconditionError(f"unknown temporal mask mode {mode!r}")
    return TemporalMask(mat, mode)


def mask_for_objective(kind: ObjectiveKind, T: int) -> TemporalMask:
    return build_temporal_mask(T, "identity" if kind is ObjectiveKind.PER_FRAME else "causal")


@dataclass(frozen=True)
class ObjectiveSample:
    """One trajectory prepared for a training step."""

    corrupted: np.ndarray  # (T, N)
    samples: tuple  # per-frame CorruptionSample, or None for untouched context frames
    loss_mask: np.ndarray  # (T, N) bool
    temporal_mask: TemporalMask
    kind: ObjectiveKind
    split: int  # first corrupted frame, 0-based


def apply_objective(frames: np.ndarray, m: int, mode: ObjectiveMode | ObjectiveKind,
                    rng: np.random.Generator, *, eta: float = 0.2,
                    gamma: Callable[[float], float] = cosine_mask_fraction,
                    loss_on: str = "all") -> ObjectiveSample:
    """Corrupt a ``(T, N)`` trajectory for one objective.

    * future-only: a split frame is drawn uniformly from the 2nd..T-th frame;
      earlier frames stay clean and are excluded from the loss.
    * joint: every frame is corrupted and scored under the causal mask.
    * per-frame: every frame is corrupted and scored under the identity mask.

    Each corrupted frame draws its own ``(u0, u1)``.  ``loss_on="masked"``
    restricts scoring to masked positions (the MaskGIT baseline).
    """
    kind = mode.kind if isinstance(mode, ObjectiveMode) else ObjectiveKind(mode)
    frames = np.asarray(frames)
    T = frames.shape[0]
    if kind is not ObjectiveKind.PER_FRAME and T < 2:
        raise PreconditionError(f"{kind.value} needs at least 2 frames, got {T}")
    if loss_on not in ("all", "masked"):
        raise PreconditionError(f"loss_on must be 'all' or 'masked', got {loss_on!r}")
    split = int(rng.integers(1, T)) if kind is ObjectiveKind.FUTURE_ONLY else 0
    corrupted = frames.copy()
    loss_mask = np.zeros(frames.shape, dtype=bool)
    samples = []
    for t in range(T):
        if t < split:
            samples.append(None)
            continue
        s = corrupt(frames[t], m, rng, eta=eta, gamma=gamma)
        corrupted[t] = s.corrupted
        if loss_on == "all":
            loss_mask[t] = True
        else:
            loss_mask[t, s.mask_positions] = True
        samples.append(s)
    return ObjectiveSample(corrupted, tuple(samples), loss_mask, mask_for_objective(kind, T), kind, split)
