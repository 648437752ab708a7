"""Distribution distances used by the training gate and sampler checks."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import DomainError


def pairwise_w2(a: np.ndarray, b: np.ndarray, max_points: int = 4096, seed: int = 0) -> float:
    """Empirical 2-Wasserstein distance between two point clouds.

    Solves the exact assignment problem on (sub)samples of up to max_points
    per side.  The same-distribution floor of this estimator is O(n^{-1/4})
    in 2D (about 0.11 for a standard normal at n=4096), so thresholds must
    budget for it.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DomainError("point clouds must be (n, d) with matching d")
    n = min(a.shape[0], b.shape[0], max_points)
    rng = np.random.default_rng(seed)
    ia = rng.choice(a.shape[0], size=n, replace=False) if a.shape[0] > n else np.arange(n)
    ib = rng.choice(b.shape[0], size=n, replace=False) if b.shape[0] > n else np.arange(n)
    cost = cdist(a[ia], b[ib], "sqeuclidean")
    r, c = linear_sum_assignment(cost)
    return float(np.sqrt(cost[r, c].mean()))


def gaussian_w2(
    mean_a: np.ndarray, cov_a: np.ndarray, mean_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """2-Wasserstein distance between two Gaussians (Bures metric).

    W2^2 = |m_a - m_b|^2 + tr(C_a + C_b - 2 (C_b^{1/2} C_a C_b^{1/2})^{1/2}).
    """
    mean_a = np.asarray(mean_a, dtype=np.float64)
    mean_b = np.asarray(mean_b, dtype=np.float64)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    sqrt_b = _sqrtm_psd(cov_b)
    cross = _sqrtm_psd(sqrt_b @ cov_a @ sqrt_b)
    val = float(np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross))
    return float(np.sqrt(max(val, 0.0)))


def moments_w2(samples: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Gaussian W2 between the empirical moments of `samples` and N(mean, cov)."""
    samples = np.asarray(samples, dtype=np.float64)
    emp_mean = samples.mean(axis=0)
    emp_cov = np.cov(samples.T)
    return gaussian_w2(emp_mean, emp_cov, mean, cov)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T
