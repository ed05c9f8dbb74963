"""Behavioral distances between diagonal-Gaussian policies and system diversity (SND).

A *policy evaluator* is any callable mapping an observation batch of shape
``(B, obs_dim)`` to a :class:`GaussianAction` (or a bare mean array for a
deterministic policy) with batch-leading arrays of shape ``(B, m)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence, Union

import numpy as np

MAX_BOX_ASSIGNMENT_BITS = 24


@dataclass(frozen=True)
class GaussianAction:
    """Action distribution N(mu, diag(sigma**2)); sigma == 0 is a deterministic action."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.zeros_like(mu) if self.sigma is None else np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != mu.shape:
            raise ValueError(f"mu shape {mu.shape} and sigma shape {sigma.shape} differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("non-finite distribution parameters")
        if np.any(sigma < 0):
            raise ValueError("sigma must be nonnegative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def deterministic(cls, mu) -> "GaussianAction":
        return cls(mu, None)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


Evaluator = Callable[[np.ndarray], Union[GaussianAction, np.ndarray]]


def w2_gaussian_diag(a: GaussianAction, b: GaussianAction):
    """2-Wasserstein distance between diagonal Gaussians, vectorized over leading axes.

    With diagonal covariances the trace term collapses to ||sigma_a - sigma_b||^2.
    """
    if a.mu.shape[-1] != b.mu.shape[-1]:
        raise ValueError(f"action dimensions differ: {a.mu.shape[-1]} vs {b.mu.shape[-1]}")
    dmu = a.mu - b.mu
    dsig = a.sigma - b.sigma
    out = np.sqrt((dmu * dmu).sum(axis=-1) + (dsig * dsig).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def _observations(O) -> np.ndarray:
    O = np.asarray(O, dtype=np.float64)
    if O.ndim == 1:
        O = O[None, :]
    if O.ndim != 2 or O.shape[0] == 0:
        raise ValueError("observation set must be a nonempty (count, obs_dim) array")
    return O


def _evaluate(pi: Evaluator, O: np.ndarray) -> GaussianAction:
    out = pi(O)
    if not isinstance(out, GaussianAction):
        out = GaussianAction.deterministic(out)
    if out.mu.shape[0] != O.shape[0]:
        raise ValueError("evaluator returned a batch of the wrong size")
    return out


def pairwise_distance(pi_i: Evaluator, pi_j: Evaluator, O) -> float:
    """Mean W2 between two policies over the observation set."""
    O = _observations(O)
    return float(np.mean(w2_gaussian_diag(_evaluate(pi_i, O), _evaluate(pi_j, O))))


def pairwise_w2(mu: np.ndarray, sigma: np.ndarray | None = None) -> np.ndarray:
    """W2 for every unordered agent pair.

    mu, sigma: (n_agents, B, m).  Returns (n_pairs, B) with pairs in (i<j) order.
    """
    mu = np.asarray(mu, dtype=np.float64)
    n = mu.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least two agents")
    ii, jj = np.triu_indices(n, k=1)
    d2 = ((mu[ii] - mu[jj]) ** 2).sum(axis=-1)
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=np.float64)
        d2 = d2 + ((sigma[ii] - sigma[jj]) ** 2).sum(axis=-1)
    return np.sqrt(d2)


def snd_from_outputs(mu: np.ndarray, sigma: np.ndarray | None = None) -> float:
    """SND from precomputed agent outputs of shape (n_agents, |O|, m)."""
    mu = np.asarray(mu)
    if mu.ndim != 3 or mu.shape[1] == 0:
        raise ValueError("expected outputs of shape (n_agents, |O| > 0, m)")
    return float(pairwise_w2(mu, sigma).mean())


def snd(policies: Sequence[Evaluator], O) -> float:
    """System neural diversity: mean over agent pairs of the mean W2 over O.

    Every row of O counts, duplicates included.
    """
    if len(policies) < 2:
        raise ValueError("diversity needs at least two agents")
    O = _observations(O)
    outs = [_evaluate(pi, O) for pi in policies]
    mu = np.stack([o.mu for o in outs])
    sigma = np.stack([o.sigma for o in outs])
    return snd_from_outputs(mu, sigma)


def snd_at_observation(policies: Sequence[Evaluator], o) -> float:
    """Mean pairwise W2 at a single observation."""
    o = np.asarray(o, dtype=np.float64)
    if o.ndim != 1:
        raise ValueError("expected a single observation vector")
    return snd(policies, o[None, :])


@dataclass(frozen=True)
class DiversityEstimator:
    """Soft-updated estimate of the unscaled deviations' diversity."""

    snd_hat: float
    tau: float
    snd_des: float
    eps_floor: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.snd_des < 0 or self.snd_hat < 0:
            raise ValueError("diversity values must be nonnegative")
        if self.eps_floor <= 0:
            raise ValueError("eps_floor must be positive")

    @classmethod
    def initial(cls, snd_des: float, tau: float, eps_floor: float = 1e-8) -> "DiversityEstimator":
        """Estimate starts at the commanded diversity."""
        return cls(snd_hat=float(snd_des), tau=float(tau), snd_des=float(snd_des), eps_floor=eps_floor)


def soft_update(est: DiversityEstimator, measured: float) -> DiversityEstimator:
    if measured < 0 or not math.isfinite(measured):
        raise ValueError(f"measured diversity must be finite and nonnegative, got {measured}")
    if not 0.0 <= est.tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {est.tau}")
    new = est.tau * measured + (1.0 - est.tau) * est.snd_hat
    return replace(est, snd_hat=max(new, est.eps_floor))


def _mean_pairwise_euclid(points: np.ndarray) -> np.ndarray:
    # points: (K, n, m) -> (K,)
    n = points.shape[1]
    ii, jj = np.triu_indices(n, k=1)
    return np.sqrt(((points[:, ii] - points[:, jj]) ** 2).sum(axis=-1)).mean(axis=-1)


def max_snd_box(n: int, a_min, a_max) -> tuple[float, np.ndarray]:
    """Largest SND reachable by n deterministic actions inside the box [a_min, a_max].

    The objective is convex on a polytope, so an optimum sits on a vertex of
    the product box; agents are exchangeable, so multisets of box corners are
    enough.  Limited to n * m <= 24.
    """
    a_min = np.atleast_1d(np.asarray(a_min, dtype=np.float64))
    a_max = np.atleast_1d(np.asarray(a_max, dtype=np.float64))
    if a_min.shape != a_max.shape or a_min.ndim != 1:
        raise ValueError("a_min and a_max must be vectors of equal length")
    if n < 2:
        raise ValueError("diversity needs at least two agents")
    if not np.all(a_min < a_max):
        raise ValueError("infeasible box: need a_min < a_max elementwise")
    m = a_min.size
    if n * m > MAX_BOX_ASSIGNMENT_BITS:
        raise ValueError(f"n*m = {n * m} exceeds the solver budget of {MAX_BOX_ASSIGNMENT_BITS}")
    corners = np.array([np.where(bits, a_max, a_min)
                        for bits in itertools.product((False, True), repeat=m)])
    best_val, best = -1.0, None
    combos = itertools.combinations_with_replacement(range(len(corners)), n)
    while True:
        chunk = np.array(list(itertools.islice(combos, 65536)), dtype=np.int64)
        if chunk.size == 0:
            break
        vals = _mean_pairwise_euclid(corners[chunk])
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best = float(vals[k]), corners[chunk[k]]
    return best_val, best.copy()
