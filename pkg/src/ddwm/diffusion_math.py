"""Transition-kernel algebra for absorbing-uniform discrete diffusion.

Every kernel in this family has the same shape: a non-mask row ``i`` keeps its
token with probability ``omega``, jumps to each of the ``m`` real codes with
probability ``nu`` (so the diagonal carries ``omega + nu``), and is absorbed
into the mask with probability ``chi``; the mask row is absorbing.  A
:class:`TransitionMatrix` stores only that triple, so products, rows and single
entries cost O(1) or O(m) regardless of vocabulary size; a dense matrix is
materialized on request for ``m <= DENSE_LIMIT``.

The module also carries the enumeration oracles used to test the masked-model
bound: exact likelihood of a tabular reverse model by summing over all latent
paths, and the bound itself with its constant evaluated exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StateSpaceTooLarge, UndefinedPosteriorError
from .schedules import NoiseSchedule

DENSE_LIMIT = 1024
ATOL = 1e-12
MAX_PATHS = 100_000


@dataclass(frozen=True)
class Vocabulary:
    """``m`` real codes ``0..m-1`` plus the mask token ``m``."""

    m: int

    def __post_init__(self):
        if self.m < 1:
            raise DomainError(f"vocabulary needs at least one real code, got m={self.m}")

    @property
    def mask_index(self) -> int:
        return self.m

    @property
    def size(self) -> int:
        return self.m + 1


def _check_rate(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise DomainError(f"{name} must lie in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic ``(m+1) x (m+1)`` kernel stored as ``(omega, nu, chi)``."""

    omega: float
    nu: float
    chi: float
    vocab: Vocabulary

    def __post_init__(self):
        m = self.vocab.m
        total = self.omega + m * self.nu + self.chi
        if abs(total - 1.0) > ATOL:
            raise DomainError(f"row sums to {total}, not 1")
        for name, v in (("omega+nu", self.omega + self.nu), ("nu", self.nu), ("chi", self.chi)):
            if v < -ATOL or v > 1.0 + ATOL:
                raise DomainError(f"{name}={v} is not a probability")

    # entry access -----------------------------------------------------

    def prob(self, i: int, j: int) -> float:
        """``q(next = j | current = i)``."""
        mask = self.vocab.mask_index
        if i == mask:
            return 1.0 if j == mask else 0.0
        if j == mask:
            return self.chi
        return self.omega + self.nu if i == j else self.nu

    def row(self, i: int) -> np.ndarray:
        mask = self.vocab.mask_index
        out = np.empty(self.vocab.size)
        if i == mask:
            out[:] = 0.0
            out[mask] = 1.0
            return out
        out[:mask] = self.nu
        out[i] += self.omega
        out[mask] = self.chi
        return out

    def column(self, j: int) -> np.ndarray:
        """``Q[:, j]``, i.e. the likelihood ``q(next = j | current = .)``."""
        mask = self.vocab.mask_index
        out = np.empty(self.vocab.size)
        if j == mask:
            out[:mask] = self.chi
            out[mask] = 1.0
            return out
        out[:mask] = self.nu
        out[j] += self.omega
        out[mask] = 0.0
        return out

    @property
    def entries(self) -> np.ndarray:
        m = self.vocab.m
        if m > DENSE_LIMIT:
            raise MemoryError(f"refusing to materialize a dense kernel for m={m} > {DENSE_LIMIT}")
        q = np.full((m + 1, m + 1), self.nu)
        q[np.arange(m), np.arange(m)] += self.omega
        q[:m, m] = self.chi
        q[m, :] = 0.0
        q[m, m] = 1.0
        return q

    def __matmul__(self, other: "TransitionMatrix") -> "TransitionMatrix":
        if not isinstance(other, TransitionMatrix):
            return NotImplemented
        if other.vocab != self.vocab:
            raise DomainError("kernels over different vocabularies")
        m = self.vocab.m
        o1, n1, c1 = self.omega, self.nu, self.chi
        o2, n2, c2 = other.omega, other.nu, other.chi
        return TransitionMatrix(
            omega=o1 * o2,
            nu=o1 * n2 + n1 * o2 + m * n1 * n2,
            chi=c1 + (o1 + m * n1) * c2,
            vocab=self.vocab,
        )


def identity(vocab: Vocabulary) -> TransitionMatrix:
    return TransitionMatrix(1.0, 0.0, 0.0, vocab)


def absorbing_step(alpha_k: float, vocab: Vocabulary) -> TransitionMatrix:
    """``(1 - alpha) I + alpha * 1 e_mask^T``."""
    a = _check_rate("alpha", alpha_k)
    return TransitionMatrix(1.0 - a, 0.0, a, vocab)


def uniform_step(beta_k: float, vocab: Vocabulary) -> TransitionMatrix:
    """Redraw a real token uniformly over the ``m`` codes with probability ``beta``."""
    b = _check_rate("beta", beta_k)
    return TransitionMatrix(1.0 - b, b / vocab.m, 0.0, vocab)


def combined_step(alpha_k: float, beta_k: float, vocab: Vocabulary) -> TransitionMatrix:
    """``Q_k = Q^a_k Q^u_k``: absorb with ``alpha``, then noise survivors with ``beta``.

    In block form the non-mask rows carry ``omega = (1-alpha)(1-beta)``,
    ``nu = (1-alpha) beta / m`` and ``alpha`` in the mask column.
    """
    a = _check_rate("alpha", alpha_k)
    b = _check_rate("beta", beta_k)
    return TransitionMatrix((1.0 - a) * (1.0 - b), (1.0 - a) * b / vocab.m, a, vocab)


def step(schedule: NoiseSchedule, k: int, vocab: Vocabulary) -> TransitionMatrix:
    if not 1 <= k <= schedule.k_max:
        raise DomainError(f"step k={k} outside 1..{schedule.k_max}")
    return combined_step(schedule.alpha[k - 1], schedule.beta[k - 1], vocab)


def cumulative(schedule: NoiseSchedule, k: int, vocab: Vocabulary) -> TransitionMatrix:
    """Closed-form ``Qbar_k = Q_1 Q_2 ... Q_k`` (``k = 0`` gives the identity).

    ``omega_bar = prod(1-alpha_s) prod(1-beta_s)``, ``chi_bar = 1 - prod(1-alpha_s)``
    and ``nu_bar = (1 - omega_bar - chi_bar) / m``.
    """
    if not 0 <= k <= schedule.k_max:
        raise DomainError(f"step k={k} outside 0..{schedule.k_max}")
    survive = schedule.alpha_bar(k)
    omega = survive * schedule.beta_keep(k)
    chi = 1.0 - survive
    nu = (survive - omega) / vocab.m
    return TransitionMatrix(omega, nu, chi, vocab)


def posterior(xk: int, x0: int, schedule: NoiseSchedule, k: int, vocab: Vocabulary) -> np.ndarray:
    """``q(x_{k-1} | x_k, x_0) = (x_0 Qbar_{k-1} * x_k Q_k^T) / (x_0 Qbar_k x_k^T)``."""
    if not 1 <= k <= schedule.k_max:
        raise DomainError(f"step k={k} outside 1..{schedule.k_max}")
    denom = cumulative(schedule, k, vocab).prob(x0, xk)
    if denom <= 0.0:
        raise UndefinedPosteriorError(x0, xk, k)
    prev = cumulative(schedule, k - 1, vocab).row(x0)
    like = step(schedule, k, vocab).column(xk)
    return prev * like / denom


# ---------------------------------------------------------------------------
# Tabular reverse models and enumeration oracles (single token, N = 1)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularDenoiser:
    """``ptilde(x0 | x_k, k)`` as a table of shape ``(K, m+1, m)``.

    ``table[k-1, j]`` is the predicted distribution over the ``m`` real codes
    when the noisy token at step ``k`` equals ``j``.
    """

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 3 or t.shape[1] != t.shape[2] + 1:
            raise DomainError(f"table must have shape (K, m+1, m), got {t.shape}")
        if np.any(t < 0) or np.any(np.abs(t.sum(-1) - 1.0) > 1e-9):
            raise DomainError("every table row must be a probability vector")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def m(self) -> int:
        return self.table.shape[2]

    def __call__(self, xk: int, k: int) -> np.ndarray:
        return self.table[k - 1, xk]

    @classmethod
    def random(cls, rng: np.random.Generator, m: int, k_max: int, concentration: float = 1.0):
        return cls(rng.dirichlet(np.full(m, concentration), size=(k_max, m + 1)))


def _as_data(data, m: int) -> np.ndarray:
    if data is None:
        return np.full(m, 1.0 / m)
    if np.isscalar(data):
        p = np.zeros(m)
        p[int(data)] = 1.0
        return p
    p = np.asarray(data, dtype=np.float64)
    if p.shape != (m,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise DomainError("data distribution must be a probability vector over the m real codes")
    return p


def _check_size(m: int, k_max: int, max_paths: int):
    paths = (m + 1) ** k_max
    if paths > max_paths:
        raise StateSpaceTooLarge(
            f"(m+1)^K = {m + 1}^{k_max} = {paths} latent paths exceeds the enumeration bound {max_paths}"
        )


def marginal(schedule: NoiseSchedule, k: int, vocab: Vocabulary, data) -> np.ndarray:
    """``q(x_k) = sum_{x_0} q(x_0) Qbar_k[x_0, x_k]``."""
    p0 = _as_data(data, vocab.m)
    q = cumulative(schedule, k, vocab)
    return sum(p0[x0] * q.row(x0) for x0 in range(vocab.m) if p0[x0] > 0)


def reverse_kernel(model: TabularDenoiser, schedule: NoiseSchedule, k: int, xk: int, vocab: Vocabulary):
    """``p_theta(x_{k-1} | x_k) = sum_{x0} q(x_{k-1} | x_k, x0) ptilde(x0 | x_k)``.

    Terms where ``ptilde`` puts zero mass are skipped, so an undefined
    posterior is only an error when the model actually relies on it.
    """
    pred = model(xk, k)
    out = np.zeros(vocab.size)
    for x0 in range(vocab.m):
        if pred[x0] > 0.0:
            out += pred[x0] * posterior(xk, x0, schedule, k, vocab)
    return out


def exact_log_likelihood(model: TabularDenoiser, schedule: NoiseSchedule, x0: int, data=None,
                         *, max_paths: int = MAX_PATHS) -> float:
    """``log p_theta(x_0)`` by summing ``p(x_K) prod_k p_theta(x_{k-1} | x_k)`` over all paths.

    The prior is the forward marginal ``q(x_K)`` under ``data`` (uniform over
    the real codes when omitted).
    """
    vocab = Vocabulary(model.m)
    k_max = schedule.k_max
    if model.table.shape[0] != k_max:
        raise DomainError("tabular model and schedule disagree on K")
    _check_size(vocab.m, k_max, max_paths)
    prior = marginal(schedule, k_max, vocab, data)
    cache: dict = {}

    def kernel(k, xk):
        key = (k, xk)
        if key not in cache:
            cache[key] = reverse_kernel(model, schedule, k, xk, vocab)
        return cache[key]

    total = 0.0
    # path = (x_K, x_{K-1}, ..., x_1); x_0 is fixed
    for path in itertools.product(range(vocab.size), repeat=k_max):
        prob = prior[path[0]]
        if prob == 0.0:
            continue
        for i in range(k_max - 1):
            k = k_max - i
            prob *= kernel(k, path[i])[path[i + 1]]
            if prob == 0.0:
                break
        else:
            prob *= kernel(1, path[-1])[x0]
            total += prob
    return math.log(total) if total > 0 else -math.inf


def expected_log_likelihood(model: TabularDenoiser, schedule: NoiseSchedule, data, **kw) -> float:
    """``E_{q(x_0)}[log p_theta(x_0)]`` with the prior built from the same ``data``."""
    p0 = _as_data(data, model.m)
    return float(sum(p0[x] * exact_log_likelihood(model, schedule, x, p0, **kw)
                     for x in range(model.m) if p0[x] > 0))


def bound_constant(schedule: NoiseSchedule, vocab: Vocabulary, data) -> float:
    """``C = E_q[log q(x_0) - sum_k log q(x_0 | x_k)]`` from pairwise marginals."""
    p0 = _as_data(data, vocab.m)
    support = [x for x in range(vocab.m) if p0[x] > 0]
    c = sum(p0[x] * math.log(p0[x]) for x in support)
    for k in range(1, schedule.k_max + 1):
        q = cumulative(schedule, k, vocab)
        qk = marginal(schedule, k, vocab, p0)
        for x in support:
            row = q.row(x)
            for j in np.nonzero(row > 0)[0]:
                joint = p0[x] * row[j]
                c -= joint * math.log(joint / qk[j])
    return c


def elbo_bound(model: TabularDenoiser, schedule: NoiseSchedule, data=None, *,
               max_paths: int = MAX_PATHS) -> float:
    """``sum_k E_{q(x_0) q(x_k|x_0)}[log ptilde(x_0 | x_k)] + C``.

    ``data`` is a distribution over the real codes, or an int for a point mass.
    """
    vocab = Vocabulary(model.m)
    _check_size(vocab.m, schedule.k_max, max_paths)
    p0 = _as_data(data, vocab.m)
    total = 0.0
    for k in range(1, schedule.k_max + 1):
        q = cumulative(schedule, k, vocab)
        for x in range(vocab.m):
            if p0[x] == 0:
                continue
            row = q.row(x)
            for j in np.nonzero(row > 0)[0]:
                pred = model(int(j), k)[x]
                total += p0[x] * row[j] * (math.log(pred) if pred > 0 else -math.inf)
    return total + bound_constant(schedule, vocab, p0)


def bound_constant_by_paths(schedule: NoiseSchedule, vocab: Vocabulary, data, *,
                            max_paths: int = MAX_PATHS) -> float:
    """``C_1 + C_2`` evaluated term by term over full forward paths ``x_{0:K}``.

    Independent of :func:`bound_constant`; it walks every path with the
    one-step kernels instead of using pairwise marginals.
    """
    p0 = _as_data(data, vocab.m)
    k_max = schedule.k_max
    _check_size(vocab.m, k_max, max_paths)
    steps = [step(schedule, k, vocab).entries for k in range(1, k_max + 1)]
    # forward marginals q(x_k) and joints q(x_{k-1}, x_k) over the full state space
    start = np.zeros(vocab.size)
    start[: vocab.m] = p0
    margs = [start]
    for q in steps:
        margs.append(margs[-1] @ q)
    # q(x0 | x_k) for the inner expectation of C_2, by Bayes over x_0
    cums = [np.eye(vocab.size)]
    for q in steps:
        cums.append(cums[-1] @ q)
    post0 = []  # post0[k][x_k, x0] = q(x0 | x_k)
    for k in range(k_max + 1):
        joint = start[:, None] * cums[k]
        with np.errstate(invalid="ignore", divide="ignore"):
            post0.append(np.where(margs[k][None, :] > 0, joint / margs[k][None, :], 0.0).T)

    c1 = c2 = 0.0
    for x0 in range(vocab.m):
        if p0[x0] == 0:
            continue
        for rest in itertools.product(range(vocab.size), repeat=k_max):
            path = (x0,) + rest
            prob = p0[x0]
            for k in range(1, k_max + 1):
                prob *= steps[k - 1][path[k - 1], path[k]]
                if prob == 0.0:
                    break
            if prob == 0.0:
                continue
            term1 = math.log(margs[k_max][path[-1]])
            term2 = 0.0
            for k in range(1, k_max + 1):
                a, b = path[k - 1], path[k]
                joint = margs[k - 1][a] * steps[k - 1][a, b]
                term1 -= math.log(steps[k - 1][a, b])
                term2 += math.log(joint / margs[k][b])  # log q(x_{k-1} | x_k)
                inner = post0[k - 1][a]
                nz = inner > 0
                term2 -= float(np.sum(inner[nz] * np.log(post0[k][b][nz])))
            c1 += prob * term1
            c2 += prob * term2
    return c1 + c2
