"""Vector quantization: nearest-code lookup, the VQ loss and codebook upkeep.

Codebook maintenance follows a fixed schedule: a code unused for
``dead_age`` iterations is dead; when more than ``dead_fraction`` of the
codebook is dead and at least ``min_reinit_age`` iterations have passed since
the last reinitialization, the codebook is re-seeded by K-means on a ring
buffer of recent encoder outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import archive
from .errors import PreconditionError

LAMBDA_CODEBOOK = 0.25
LAMBDA_COMMIT = 1.0


class MemoryBank:
    """FIFO ring buffer of the most recent ``capacity`` vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise PreconditionError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._buf = np.zeros((capacity, dim))
        self._next = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def push(self, z: np.ndarray):
        z = np.asarray(z, dtype=np.float64).reshape(-1, self._buf.shape[1])
        if len(z) >= self.capacity:
            z = z[-self.capacity :]
        n = len(z)
        idx = (self._next + np.arange(n)) % self.capacity
        self._buf[idx] = z
        self._next = (self._next + n) % self.capacity
        self._count = min(self.capacity, self._count + n)

    def contents(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self._count < self.capacity:
            return self._buf[: self._count].copy()
        return np.roll(self._buf, -self._next, axis=0)


@dataclass
class Codebook:
    codes: np.ndarray
    dead_age: int = 256
    dead_fraction: float = 0.03
    min_reinit_age: int = 200
    reinit_scope: str = "all"  # or "dead_only"
    bank_factor: int = 10
    usage_age: np.ndarray = None
    iteration: int = 0
    last_reinit: int = 0
    bank: MemoryBank = None
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.codes = np.array(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise PreconditionError(f"codebook must be (C >= 1, d), got shape {self.codes.shape}")
        if self.reinit_scope not in ("all", "dead_only"):
            raise PreconditionError(f"reinit_scope must be 'all' or 'dead_only', got {self.reinit_scope!r}")
        if self.usage_age is None:
            self.usage_age = np.zeros(self.size, dtype=np.int64)
        if self.bank is None:
            self.bank = MemoryBank(self.bank_factor * self.size, self.dim)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def dead_mask(self) -> np.ndarray:
        return self.usage_age >= self.dead_age

    def save(self, stem):
        tensors = {"codes": self.codes, "usage_age": self.usage_age, "bank": self.bank.contents()}
        meta = {"kind": "codebook", "iteration": self.iteration, "last_reinit": self.last_reinit,
                "dead_age": self.dead_age, "dead_fraction": self.dead_fraction,
                "min_reinit_age": self.min_reinit_age, "reinit_scope": self.reinit_scope,
                "bank_factor": self.bank_factor}
        return archive.save(stem, tensors, meta)

    @classmethod
    def load(cls, stem) -> "Codebook":
        t, meta = archive.load(stem)
        cb = cls(t["codes"], dead_age=meta["dead_age"], dead_fraction=meta["dead_fraction"],
                 min_reinit_age=meta["min_reinit_age"], reinit_scope=meta["reinit_scope"],
                 bank_factor=meta["bank_factor"], usage_age=t["usage_age"],
                 iteration=meta["iteration"], last_reinit=meta["last_reinit"])
        cb.bank.push(t["bank"])
        return cb


def nearest(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code per row of ``z``; ties go to the lower index."""
    z = np.asarray(z, dtype=np.float64)
    d2 = np.sum((z[:, None, :] - codes[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)  # argmin returns the first minimum


def quantize(z: np.ndarray, codebook: Codebook, *, update: bool = True):
    """Return ``(indices, z_q)``; with ``update`` also advance usage ages and the bank."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != codebook.dim:
        raise PreconditionError(f"inputs of shape {z.shape} do not match code dimension {codebook.dim}")
    idx = nearest(z, codebook.codes)
    zq = codebook.codes[idx].copy()
    if update:
        record_usage(codebook, idx)
        codebook.bank.push(z)
    return idx, zq


def record_usage(codebook: Codebook, idx: np.ndarray):
    used = np.zeros(codebook.size, dtype=bool)
    used[np.asarray(idx, dtype=np.int64)] = True
    codebook.usage_age = np.where(used, 0, codebook.usage_age + 1)


def vq_loss(z: np.ndarray, zq: np.ndarray, lam1: float = LAMBDA_CODEBOOK, lam2: float = LAMBDA_COMMIT):
    """``lam1 * |sg[z] - zq|^2 + lam2 * |sg[zq] - z|^2`` summed over rows and dims.

    Returns ``(loss, grad_codes_side, grad_z)``: the codebook term only yields
    a gradient for ``zq`` (hence the selected codes), the commitment term only
    for ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    zq = np.asarray(zq, dtype=np.float64)
    if z.shape != zq.shape:
        raise PreconditionError(f"shape mismatch {z.shape} vs {zq.shape}")
    diff = zq - z
    sq = float(np.sum(diff * diff))
    return (lam1 + lam2) * sq, 2 * lam1 * diff, -2 * lam2 * diff


def code_gradients(grad_zq: np.ndarray, idx: np.ndarray, n_codes: int) -> np.ndarray:
    """Scatter per-row gradients wrt ``z_q`` onto the codebook rows they selected."""
    g = np.zeros((n_codes, grad_zq.shape[1]))
    np.add.at(g, idx, grad_zq)
    return g


def straight_through(grad_zq: np.ndarray) -> np.ndarray:
    """Gradient wrt the encoder output: the decoder gradient, copied unchanged."""
    return np.array(grad_zq, copy=True)


def kmeans(data: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    centroids, _ = kmeans2(np.asarray(data, dtype=np.float64), k, iter=iters, minit="++", seed=rng)
    return centroids


def maintain(codebook: Codebook, rng: np.random.Generator) -> bool:
    """Per-iteration upkeep (call after :func:`quantize`); returns True if codes were replaced."""
    codebook.iteration += 1
    dead = codebook.dead_mask()
    frac = dead.mean()
    since = codebook.iteration - codebook.last_reinit
    if not (frac > codebook.dead_fraction and since >= codebook.min_reinit_age):
        return False
    bank = codebook.bank.contents()
    if len(bank) < codebook.size:
        codebook.events.append({"iteration": codebook.iteration, "event": "skipped",
                                "reason": f"bank holds {len(bank)} vectors, need {codebook.size}"})
        return False
    centroids = kmeans(bank, codebook.size, rng)
    if codebook.reinit_scope == "all":
        codebook.codes = centroids
        codebook.usage_age[:] = 0
    else:
        codebook.codes[dead] = centroids[: int(dead.sum())]
        codebook.usage_age[dead] = 0
    codebook.last_reinit = codebook.iteration
    codebook.events.append({"iteration": codebook.iteration, "event": "reinit",
                            "dead_fraction": float(frac), "scope": codebook.reinit_scope})
    return True
