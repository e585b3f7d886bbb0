"""Gaussian pushforward of a 6DoF estimate through the 6DoF-to-matrix map.

Entries of the 9-vector are ordered [r1..r6, R(1,3), R(2,3), R(3,3)]: the first two
columns pass through unchanged and the third column is their cross product. Indices in
the tables below are 1-based to match that layout.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .rot6d import hypothesis_deviation, project_sixdof

logger = logging.getLogger("tripose.uncertainty")

HYPOTHESIS_TOLERANCE = 1e-6
HYPOTHESIS_LIMIT = 1e-2
MIN_MONTE_CARLO_SAMPLES = 1000

ENTRY_NAMES = ("r1", "r2", "r3", "r4", "r5", "r6", "R13", "R23", "R33")

# Third-column entry k = sum of sign * r_i * r_j.
CROSS_TERMS = {
    1: ((1, 2, 6), (-1, 3, 5)),
    2: ((1, 3, 4), (-1, 1, 6)),
    3: ((1, 1, 5), (-1, 2, 4)),
}

# Cov[third-column entry k, r_l] / w^2 = sign * r_hat_m, as (k, l, sign, m).
COLUMN_COVARIANCES = (
    (1, 2, 1, 6),
    (1, 3, -1, 5),
    (1, 5, -1, 3),
    (1, 6, 1, 2),
    (2, 1, -1, 6),
    (2, 3, 1, 4),
    (2, 4, 1, 3),
    (2, 6, -1, 1),
    (3, 1, 1, 5),
    (3, 2, -1, 4),
    (3, 4, -1, 2),
    (3, 5, 1, 1),
)

# Cov[entry k1, entry k2] / w^2 = -(r_a r_b + r_c r_d).
CROSS_COVARIANCES = (
    (1, 2, (1, 2), (4, 5)),
    (2, 3, (2, 3), (5, 6)),
    (3, 1, (1, 3), (4, 6)),
)

# Var[entry k] / w^2 = 2 w^2 + sum of these squared means.
VARIANCE_TERMS = {
    1: (2, 6, 5, 3),
    2: (3, 4, 1, 6),
    3: (1, 5, 4, 2),
}


class HypothesisViolationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PushforwardGaussian:
    mean: np.ndarray
    sigma: np.ndarray
    w: float

    @property
    def covariance(self) -> np.ndarray:
        return self.w**2 * self.sigma


@dataclass(frozen=True, eq=False)
class MonteCarloMoments:
    mean: np.ndarray
    covariance: np.ndarray
    standard_error: np.ndarray
    samples: int


def _checked_estimate(r_hat: np.ndarray) -> np.ndarray:
    r_hat = np.asarray(r_hat, dtype=np.float64).reshape(6)
    deviation = float(hypothesis_deviation(r_hat))
    if deviation > HYPOTHESIS_LIMIT:
        raise HypothesisViolationError(
            f"6DoF estimate is {deviation:.3g} away from unit orthogonal halves"
        )
    if deviation > HYPOTHESIS_TOLERANCE:
        logger.debug("projecting estimate with deviation %.3g", deviation)
        return project_sixdof(r_hat)
    return r_hat


def pushforward_mean(r_hat: np.ndarray) -> np.ndarray:
    r_hat = np.asarray(r_hat, dtype=np.float64)
    third = np.cross(r_hat[..., 0:3], r_hat[..., 3:6])
    return np.concatenate([r_hat, third], axis=-1)


def sigma_matrix(r_hat: np.ndarray, w: float) -> np.ndarray:
    """Σ for an estimate already on the hypothesis manifold (no checks)."""
    r = np.concatenate([[np.nan], np.asarray(r_hat, dtype=np.float64).reshape(6)])
    sigma = np.zeros((9, 9))
    sigma[:6, :6] = np.eye(6)
    for k, terms in VARIANCE_TERMS.items():
        sigma[5 + k, 5 + k] = 2.0 * w**2 + sum(r[i] ** 2 for i in terms)
    for k, l, sign, m in COLUMN_COVARIANCES:
        sigma[5 + k, l - 1] = sigma[l - 1, 5 + k] = sign * r[m]
    for k1, k2, (a, b), (c, d) in CROSS_COVARIANCES:
        sigma[5 + k1, 5 + k2] = sigma[5 + k2, 5 + k1] = -(r[a] * r[b] + r[c] * r[d])
    return sigma


def covariance_sixdof_pushforward(r_hat: np.ndarray, w: float) -> PushforwardGaussian:
    if w < 0:
        raise ValueError("w must be non-negative")
    estimate = _checked_estimate(r_hat)
    return PushforwardGaussian(
        mean=pushforward_mean(estimate),
        sigma=sigma_matrix(estimate, w),
        w=float(w),
    )


def _draw(r_hat: np.ndarray, w: float, n: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    r = r_hat + w * rng.standard_normal((n, 6))
    return pushforward_mean(r)


def _partition_sizes(n: int, partitions: int) -> list[int]:
    base, extra = divmod(n, partitions)
    return [base + (1 if i < extra else 0) for i in range(partitions)]


@dataclass(frozen=True)
class RunningMoments:
    count: int
    mean: np.ndarray
    comoment: np.ndarray

    @classmethod
    def of(cls, samples: np.ndarray) -> RunningMoments:
        mean = samples.mean(axis=0)
        d = samples - mean
        return cls(count=samples.shape[0], mean=mean, comoment=d.T @ d)


def merge_moments(a: RunningMoments, b: RunningMoments) -> RunningMoments:
    """Exact mean and co-moment of the union of two sample sets."""
    count = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / count)
    comoment = a.comoment + b.comoment + np.outer(delta, delta) * (a.count * b.count / count)
    return RunningMoments(count=count, mean=mean, comoment=comoment)


def merge_all(parts: list[RunningMoments]) -> RunningMoments:
    """Balanced pairwise reduction; the order of ``parts`` fixes the result."""
    if not parts:
        raise ValueError("nothing to merge")
    while len(parts) > 1:
        paired = [merge_moments(a, b) for a, b in zip(parts[0::2], parts[1::2])]
        if len(parts) % 2:
            paired.append(parts[-1])
        parts = paired
    return parts[0]


def monte_carlo_pushforward(
    r_hat: np.ndarray,
    w: float,
    n_samples: int,
    seed: int,
    partitions: int = 1,
    workers: int = 1,
) -> MonteCarloMoments:
    """Empirical moments of [r, r[0:3] x r[3:6]] for r ~ N(r_hat, w^2 I).

    Partitions draw from spawned seeds and their means and co-moments are merged
    pairwise in partition order, so the result depends on (seed, partitions) only.
    The standard errors come from a second pass centered on the merged mean.
    """
    if n_samples < MIN_MONTE_CARLO_SAMPLES:
        raise ValueError(f"need at least {MIN_MONTE_CARLO_SAMPLES} samples, got {n_samples}")
    if partitions < 1 or partitions > n_samples:
        raise ValueError("partitions must be between 1 and the sample count")
    r_hat = np.asarray(r_hat, dtype=np.float64).reshape(6)
    seeds = np.random.SeedSequence(seed).spawn(partitions)
    sizes = _partition_sizes(n_samples, partitions)

    def first_pass(i: int) -> RunningMoments:
        return RunningMoments.of(_draw(r_hat, w, sizes[i], seeds[i]))

    def second_pass(i: int, mean: np.ndarray) -> np.ndarray:
        d = _draw(r_hat, w, sizes[i], seeds[i]) - mean
        d2 = d * d
        return d2.T @ d2

    with ThreadPoolExecutor(max_workers=workers) as pool:
        merged = merge_all(list(pool.map(first_pass, range(partitions))))
        fourth = np.sum(
            list(pool.map(lambda i: second_pass(i, merged.mean), range(partitions))), axis=0
        )

    mean = merged.mean
    comoment = merged.comoment
    covariance = comoment / (n_samples - 1)
    biased = comoment / n_samples
    spread = np.maximum(fourth / n_samples - biased**2, 0.0)
    return MonteCarloMoments(
        mean=mean,
        covariance=covariance,
        standard_error=np.sqrt(spread / n_samples),
        samples=n_samples,
    )


def sylvester_minors(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {sigma.shape}")
    return np.array([np.linalg.det(sigma[:n, :n]) for n in range(1, sigma.shape[0] + 1)])


def expected_minors(w: float) -> np.ndarray:
    s = 2.0 * w**2
    return np.array([1.0] * 6 + [s, s**2, s**3])


# column-major position (3 * col + row) -> row-major position (3 * row + col)
ROW_MAJOR_ORDER = np.array([3 * (i % 3) + i // 3 for i in range(9)])


def rowmajor_sigma(r_hat: np.ndarray, w: float) -> np.ndarray:
    """Per-joint Σ for (..., 6) estimates, re-indexed to row-major vec(R).

    Estimates are projected onto the hypothesis manifold first.
    """
    r_hat = project_sixdof(np.asarray(r_hat, dtype=np.float64))
    flat = r_hat.reshape(-1, 6)
    out = np.empty((flat.shape[0], 9, 9))
    for i, r in enumerate(flat):
        sigma = sigma_matrix(r, w)
        permuted = np.empty_like(sigma)
        permuted[np.ix_(ROW_MAJOR_ORDER, ROW_MAJOR_ORDER)] = sigma
        out[i] = permuted
    return out.reshape(r_hat.shape[:-1] + (9, 9))
