"""Value-guidance estimators.

All of them approximate the same target, the optimal guidance
psi_star = (1/alpha) * grad V:

* current-state first order:  (1/alpha) grad_x r(xhat_0(x))
* lookahead first order:      sigma^2/(alpha omega) * mean_k grad_{x_{i-1}} r(xhat_{0|j}^k)
* lookahead zeroth order:     sigma/(alpha omega)   * mean_k r(xhat_{0|j}^k) eps_i^k

plus reward centering / group normalization (a control variate and a scale
normalizer for the zeroth-order family) and the inference-time noise-space
update that applies the zeroth-order rule to a frozen decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DomainError
from .flow_schedules import FlowSpec, TimeGrid, ab_coeffs
from .mixture_oracle import LinearReward, tweedie
from .sampler import BranchTree, ScoreField

_STD_FLOOR = 1e-8


class StatsMode(str, Enum):
    RAW = "raw"
    CENTERED = "centered"
    GROUP_NORMALIZED = "group_normalized"


@dataclass(frozen=True)
class RewardStats:
    """Raw rewards with their group statistics and the transformed terms."""

    raw: np.ndarray
    mean: float
    std: float
    mode: StatsMode
    terms: np.ndarray
    degenerate: bool = False


def reward_stats(rewards: np.ndarray, mode: StatsMode | str = StatsMode.RAW) -> RewardStats:
    """Center or group-normalize a reward group.

    Group-normalization divides by the n-1 sample standard deviation with a
    1e-8 floor; a zero-spread group falls back to plain centering and sets
    the degenerate flag.
    """
    mode = StatsMode(mode)
    raw = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if raw.size == 0:
        raise DomainError("empty reward group")
    mean = float(raw.mean())
    std = float(raw.std(ddof=1)) if raw.size > 1 else 0.0
    degenerate = False
    if mode == StatsMode.RAW:
        terms = raw
    elif mode == StatsMode.CENTERED:
        terms = raw - mean
    else:
        if std <= _STD_FLOOR:
            terms = raw - mean
            degenerate = True
        else:
            terms = (raw - mean) / max(std, _STD_FLOOR)
    return RewardStats(raw=raw, mean=mean, std=std, mode=mode, terms=terms, degenerate=degenerate)


@dataclass(frozen=True)
class GuidanceEstimate:
    """A guidance estimate: the mean of per-sample terms, kept for diagnostics."""

    value: np.ndarray
    n_samples: int
    terms: np.ndarray

    @classmethod
    def from_terms(cls, terms: np.ndarray) -> "GuidanceEstimate":
        terms = np.asarray(terms, dtype=np.float64).reshape(-1, 2)
        return cls(value=terms.mean(axis=0), n_samples=terms.shape[0], terms=terms)


def psi_la_zeroth_order(
    tree: BranchTree,
    i: int,
    alpha: float,
    stats_mode: StatsMode | str = StatsMode.RAW,
) -> GuidanceEstimate:
    """Zeroth-order lookahead estimate from a recorded branch at step i.

    sigma/(alpha omega) * mean over branches of (transformed reward) * eps.
    The reward of a branch is the mean over its descendant leaves, so
    recursive branching reduces to the same formula.
    """
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    coeffs = tree.plan.kernels[i]
    if coeffs is None or coeffs.sigma <= 0.0:
        raise ContractError(f"step {i} is deterministic; no recorded noise to weight")
    _, eps, rbar = tree.branch_groups(i)
    stats = reward_stats(rbar, stats_mode)
    scale = coeffs.sigma / (alpha * coeffs.omega)
    return GuidanceEstimate.from_terms(scale * stats.terms[:, None] * eps)


def psi_la_first_order(
    tree: BranchTree,
    i: int,
    reward: LinearReward,
    alpha: float,
    fd_step: float = 1e-4,
) -> GuidanceEstimate:
    """First-order lookahead estimate with the full frozen-noise chain.

    For each branch child y at step i-1, the gradient of the mean leaf
    reward with respect to y is taken through the recorded continuation
    (central differences on the 2x2 Jacobian; exact for a linear reward up
    to O(h^2) curvature of the chain), then averaged and scaled by
    sigma^2 / (alpha omega).
    """
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    j = tree.plan.lookahead
    if j > i - 1:
        raise ContractError("lookahead step must precede the branch step; use the current-state estimator")
    coeffs = tree.plan.kernels[i]
    if coeffs is None or coeffs.sigma <= 0.0:
        raise ContractError(f"step {i} is deterministic; branch children undefined")
    children = tree.nodes_at_step(i - 1)
    scale = coeffs.sigma**2 / (alpha * coeffs.omega)
    h = fd_step
    offsets = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    level = tree._level_of(int(children[0]))
    y = tree.states[children][None, :, :] + offsets[:, None, :]  # (4, K, 2)
    xhat = tree.resimulate_level(level, y)  # (4, L, 2)
    vals = reward(xhat).reshape(4, children.size, -1).mean(axis=2)  # (4, K)
    grads = np.stack(
        [(vals[0] - vals[1]) / (2 * h), (vals[2] - vals[3]) / (2 * h)], axis=1
    )
    return GuidanceEstimate.from_terms(scale * grads)


def psi_cs_first_order(
    x: np.ndarray,
    i: int,
    field: ScoreField,
    flow: FlowSpec,
    grid: TimeGrid,
    reward: LinearReward,
    alpha: float,
    gamma_tilde: float = 1.0,
    residual: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    fd_step: float = 1e-4,
) -> GuidanceEstimate:
    """Current-state first-order estimate (1/alpha) grad_x r(xhat_0(x)).

    The posterior-mean Jacobian is taken by central differences through
    tweedie(field); fields that expose an exact `tweedie_jacobian` (the
    single-Gaussian oracle) short-circuit the differencing.  `residual` is
    the optional learned correction of the exact decomposition
    grad V = gamma_tilde * grad r(xhat) + g(x); it defaults to zero.
    """
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(2)
    a, b, _, _ = ab_coeffs(flow, float(grid.times[i]))
    jac = None
    probe = getattr(field, "tweedie_jacobian", None)
    if probe is not None:
        jac = probe(x, i)
    if jac is None:
        h = fd_step
        offsets = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
        pts = x + offsets
        xhats = tweedie(pts, field(pts, i), a, b)
        jac = np.stack(
            [(xhats[0] - xhats[1]) / (2 * h), (xhats[2] - xhats[3]) / (2 * h)], axis=1
        )
    grad = gamma_tilde * (jac.T @ reward.slope)
    if residual is not None:
        grad = grad + np.asarray(residual(x), dtype=np.float64).reshape(2)
    return GuidanceEstimate.from_terms((grad / alpha)[None, :])


def dno_noise_update(
    z: np.ndarray,
    decoder: Callable[[np.ndarray], np.ndarray],
    reward: Callable[[np.ndarray], np.ndarray],
    sigma_perturb: float,
    k: int,
    rng: np.random.Generator,
    lr: float = 1.0,
) -> np.ndarray:
    """Inference-time noise-space ascent step.

    Estimates the reward gradient in noise space with the zeroth-order rule
    mean_k [(r(D(z + sigma eps)) - r(D(z))) eps] / sigma and returns
    z + lr * estimate.  The baseline r(D(z)) is the control variate that
    makes single-draw updates usable.
    """
    if not sigma_perturb > 0:
        raise DomainError("sigma_perturb must be positive")
    if k < 1:
        raise DomainError("k must be >= 1")
    z = np.asarray(z, dtype=np.float64).reshape(2)
    eps = rng.standard_normal((k, 2))
    base = float(np.asarray(reward(decoder(z[None, :]))).reshape(-1)[0])
    vals = np.asarray(reward(decoder(z[None, :] + sigma_perturb * eps))).reshape(k)
    estimate = ((vals - base)[:, None] * eps).mean(axis=0) / sigma_perturb
    return z + lr * estimate
