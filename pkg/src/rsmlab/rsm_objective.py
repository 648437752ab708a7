"""The unified reward-score-matching objective and its method registry.

Every supported fine-tuning method minimizes the same per-step loss

    C1(t_i) ( || s_theta - (s_ref + psi) ||^2 + C2(t_i) || s_theta - s_old ||^2 )

with psi = gamma(t_i) * psi_hat, and differs only in which estimator
produces psi_hat, the lookahead depth, branching, the temporal weights
gamma / C1 / C2, and the clipping rule.  `method_config` instantiates the
registry row for each named method on a concrete kernel schedule.

The normalized influence metric

    h(t_i) = delta(t_i) C1(t_i) * { gamma/alpha            (current-state)
                                  { gamma sigma^2/(alpha omega)  (lookahead)

summarizes how strongly the common reward-gradient signal enters the update
at each step after temporal weighting and parameterization conversion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, UndefinedWeightError
from .flow_schedules import FlowSpec, KernelCoeffs, TimeGrid, sampler_weight


# ------------------------------------------------------------------ losses


def master_loss(s_theta, s_ref, s_old, psi, c1, c2):
    """Unified per-step loss; broadcasts over leading batch dimensions."""
    s_theta = np.asarray(s_theta, dtype=np.float64)
    s_ref = np.asarray(s_ref, dtype=np.float64)
    s_old = np.asarray(s_old, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    match = np.sum((s_theta - s_ref - psi) ** 2, axis=-1)
    anchor = np.sum((s_theta - s_old) ** 2, axis=-1)
    out = np.asarray(c1) * (match + np.asarray(c2) * anchor)
    return float(out) if out.ndim == 0 else out


def canonical_gradient(s_theta, s_ref, s_old, psi, c1, c2):
    """Half-gradient G of the unified loss with respect to s_theta.

    d(master_loss)/d(s_theta) = 2 G with
    G = C1 ( -psi + (s_theta - s_ref) + C2 (s_theta - s_old) ).
    """
    s_theta = np.asarray(s_theta, dtype=np.float64)
    s_ref = np.asarray(s_ref, dtype=np.float64)
    s_old = np.asarray(s_old, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)[..., None] if np.ndim(c1) else c1
    c2 = np.asarray(c2, dtype=np.float64)[..., None] if np.ndim(c2) else c2
    return c1 * (-psi + (s_theta - s_ref) + c2 * (s_theta - s_old))


# ---------------------------------------------------------------- clipping


class ClipKind(str, Enum):
    NONE = "none"
    PPO_HINGE = "ppo_hinge"
    FAIR_CLIP = "fair_clip"
    GUARD_CENTERED = "guard_centered"


@dataclass(frozen=True)
class ClipRule:
    kind: ClipKind
    xi: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", ClipKind(self.kind))
        if self.kind != ClipKind.NONE and not self.xi > 0:
            raise DomainError("clip threshold xi must be positive")


@dataclass(frozen=True)
class ClipDecision:
    """Outcome of a clip rule; a suppressed update zeroes psi and C2."""

    active: bool
    rho: Optional[float]
    statistic: float
    kind: ClipKind


def hinge_regime(rho: float, reward_sign: float, xi: float) -> bool:
    """Truth table of the hinge-clipped policy loss.

    The reward term survives (returns True) iff
    (1-xi <= rho <= 1+xi) or (rho < 1-xi and r >= 0) or (rho > 1+xi and r <= 0).
    """
    if 1.0 - xi <= rho <= 1.0 + xi:
        return True
    if rho < 1.0 - xi and reward_sign >= 0.0:
        return True
    if rho > 1.0 + xi and reward_sign <= 0.0:
        return True
    return False


def apply_clip(
    rule: ClipRule,
    mu_theta: np.ndarray,
    mu_old: np.ndarray,
    sigma_tilde: float,
    dt: float,
    reward_sign: float,
    eps: Optional[np.ndarray] = None,
    log_rho_center: Optional[float] = None,
) -> ClipDecision:
    """Decide whether the reward-bearing part of the update survives.

    The importance ratio is computed internally from the transition-mean
    drift: with the sampled noise eps of the data-collecting step,
    log rho = (mu_theta - mu_old) . eps / sigma - |dmu|^2 / (2 sigma^2)
    where sigma^2 = sigma_tilde^2 dt; without eps the expected log-ratio
    -|dmu|^2 / (2 sigma^2) is used.

    * ppo_hinge clips rho against [1-xi, 1+xi] with the sign table of
      `hinge_regime`; its decision depends on the step scale sigma^2.
    * fair_clip thresholds the scale-free drift |dmu|^2 / 2 against xi, the
      timestep-fair rescaling of the quadratic penalty.
    * guard_centered clips sigma (log rho - E[log rho]); the centering
      default is the analytic expectation, an explicit batch estimate can be
      passed via log_rho_center.
    """
    mu_theta = np.asarray(mu_theta, dtype=np.float64)
    mu_old = np.asarray(mu_old, dtype=np.float64)
    dmu = mu_theta - mu_old
    dmu_sq = float(np.sum(dmu * dmu))
    if rule.kind == ClipKind.NONE:
        return ClipDecision(active=True, rho=None, statistic=0.0, kind=rule.kind)
    if rule.kind == ClipKind.FAIR_CLIP:
        stat = 0.5 * dmu_sq
        return ClipDecision(active=stat <= rule.xi, rho=None, statistic=stat, kind=rule.kind)
    sigma_sq = sigma_tilde**2 * dt
    if sigma_sq <= 0:
        raise DomainError("ratio-based clip rules need sigma > 0")
    sigma = math.sqrt(sigma_sq)
    log_rho = -dmu_sq / (2.0 * sigma_sq)
    if eps is not None:
        log_rho += float(dmu @ np.asarray(eps, dtype=np.float64)) / sigma
    if rule.kind == ClipKind.PPO_HINGE:
        rho = math.exp(log_rho)
        return ClipDecision(
            active=hinge_regime(rho, reward_sign, rule.xi),
            rho=rho,
            statistic=log_rho,
            kind=rule.kind,
        )
    center = -dmu_sq / (2.0 * sigma_sq) if log_rho_center is None else float(log_rho_center)
    stat = sigma * (log_rho - center)
    return ClipDecision(active=abs(stat) <= rule.xi, rho=math.exp(log_rho), statistic=stat, kind=rule.kind)


# --------------------------------------------------------------- registry


class MethodName(str, Enum):
    VGG_FLOW = "vgg_flow"
    SQDF = "sqdf"
    RESIDUAL_NABLA_DB = "residual_nabla_db"
    REINFORCE_KL = "reinforce_kl"
    PPO_GRPO = "ppo_grpo"
    PCPO_BASE = "pcpo_base"
    PCPO_REWEIGHT_DIFFUSION = "pcpo_reweight_diffusion"
    PCPO_REWEIGHT_FLOW = "pcpo_reweight_flow"
    BRANCH_GRPO = "branch_grpo"
    TEMPFLOW_GRPO = "tempflow_grpo"
    GRPO_GUARD = "grpo_guard"
    CUSTOM = "custom"


class EstimatorKind(str, Enum):
    CURRENT_STATE_FO = "cs_first_order"
    LOOKAHEAD_FO = "la_first_order"
    LOOKAHEAD_ZO = "la_zeroth_order"


class LookaheadRule(str, Enum):
    CURRENT = "current"  # j = i
    ONE_STEP = "one_step"  # j = i-1
    TERMINAL = "terminal"  # j = 0


@dataclass(frozen=True)
class MethodConfig:
    """One registry row bound to a concrete kernel schedule.

    gamma / c1 / c2_const / c2_rcoef are per-step arrays (index 0 unused;
    nan where no kernel is defined); C2(i, r) = c2_const[i] + c2_rcoef[i] r.
    """

    name: MethodName
    estimator: EstimatorKind
    lookahead: LookaheadRule
    branching: bool
    alpha: float
    gamma: np.ndarray
    c1: np.ndarray
    c2_const: np.ndarray
    c2_rcoef: np.ndarray
    valid: np.ndarray
    times: np.ndarray
    deltas: np.ndarray
    clip: ClipRule = field(default_factory=lambda: ClipRule(kind="none"))
    h_override: Optional[np.ndarray] = None

    def c2(self, i: int, reward_value: float = 0.0) -> float:
        return float(self.c2_const[i] + self.c2_rcoef[i] * reward_value)

    def valid_steps(self) -> np.ndarray:
        return np.nonzero(self.valid)[0]


def effective_guidance(method: MethodConfig, psi_hat: np.ndarray, i: int) -> np.ndarray:
    """Temporal weighting of the raw estimate: psi = gamma(t_i) psi_hat."""
    value = getattr(psi_hat, "value", psi_hat)
    if not method.valid[i]:
        raise ContractError(f"method {method.name.value} undefined at step {i}")
    return method.gamma[i] * np.asarray(value, dtype=np.float64)


def influence_h(method: MethodConfig, coeffs: KernelCoeffs, i: int) -> float:
    """Normalized influence metric at step i for the given kernel."""
    if method.h_override is not None:
        return float(method.h_override[i])
    if not method.valid[i]:
        raise ContractError(f"method {method.name.value} undefined at step {i}")
    base = coeffs.delta * method.c1[i] * method.gamma[i] / method.alpha
    if method.lookahead == LookaheadRule.CURRENT:
        return float(base)
    if coeffs.sigma <= 0.0:
        raise UndefinedWeightError("lookahead influence needs a stochastic step")
    return float(base * coeffs.sigma**2 / coeffs.omega)


def method_config(
    name: MethodName | str,
    kernels: Sequence[Optional[KernelCoeffs]],
    grid: TimeGrid,
    alpha: float,
    flow: Optional[FlowSpec] = None,
    d: int = 2,
    sqdf_gamma_base: float = 0.9,
    resdb_wr_over_wf: float = 1.0,
    clip: Optional[ClipRule] = None,
    w_prime: Optional[np.ndarray] = None,
    sigma_prime: Optional[np.ndarray] = None,
) -> MethodConfig:
    """Instantiate the registry row for a named method on a kernel schedule.

    flow is required for the rows that reference the VP signal level
    (residual_nabla_db).  w_prime / sigma_prime feed the reweighted rows:
    pcpo_reweight_diffusion substitutes them into h directly, while
    pcpo_reweight_flow defaults to the flattened schedule w' = (sum w) dt.
    """
    name = MethodName(name)
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    n = grid.n_steps
    if len(kernels) != n + 1:
        raise ConfigError("kernel schedule length must be n_steps + 1")
    gamma = np.full(n + 1, np.nan)
    c1 = np.full(n + 1, np.nan)
    c2_const = np.zeros(n + 1)
    c2_rcoef = np.zeros(n + 1)
    valid = np.zeros(n + 1, dtype=bool)
    h_override = None

    zo_names = {
        MethodName.REINFORCE_KL,
        MethodName.PPO_GRPO,
        MethodName.PCPO_BASE,
        MethodName.PCPO_REWEIGHT_DIFFUSION,
        MethodName.PCPO_REWEIGHT_FLOW,
        MethodName.BRANCH_GRPO,
        MethodName.TEMPFLOW_GRPO,
        MethodName.GRPO_GUARD,
    }

    def std_c1(k: KernelCoeffs) -> float:
        return 0.5 * alpha * k.omega**2 / k.sigma**2

    # PCPO flow reweighting: w' = (sum_i w_i) dt_i, which preserves avg(w)
    w_table = np.full(n + 1, np.nan)
    if name in (MethodName.PCPO_REWEIGHT_FLOW, MethodName.PCPO_REWEIGHT_DIFFUSION):
        for i in range(1, n + 1):
            k = kernels[i]
            if k is not None and k.sigma > 0:
                w_table[i] = sampler_weight(k)
        finite = np.isfinite(w_table)
        if w_prime is None:
            if name == MethodName.PCPO_REWEIGHT_FLOW:
                zeta = np.nansum(w_table)
                w_prime = np.where(finite, zeta * grid.deltas, np.nan)
            else:
                w_prime = np.where(finite, np.nanmean(w_table[finite]), np.nan)
        else:
            w_prime = np.asarray(w_prime, dtype=np.float64)

    for i in range(1, n + 1):
        k = kernels[i]
        if k is None:
            continue
        t_i = float(grid.times[i])
        dt_i = float(grid.deltas[i])
        if name in zo_names:
            if k.sigma <= 0.0:
                continue  # no stochastic transition, no policy term
            c1[i] = std_c1(k)
            if name == MethodName.REINFORCE_KL:
                gamma[i] = 1.0
            elif name in (MethodName.PPO_GRPO, MethodName.PCPO_BASE, MethodName.BRANCH_GRPO):
                gamma[i] = 1.0
                c2_rcoef[i] = 1.0 / alpha
            elif name == MethodName.PCPO_REWEIGHT_DIFFUSION:
                gamma[i] = 1.0
                c2_rcoef[i] = 1.0 / alpha
            elif name == MethodName.PCPO_REWEIGHT_FLOW:
                gamma[i] = float(w_prime[i] / w_table[i])
                c2_rcoef[i] = gamma[i] / alpha
            elif name == MethodName.TEMPFLOW_GRPO:
                gamma[i] = 2.25 * k.sigma
                c2_rcoef[i] = gamma[i] / alpha
            elif name == MethodName.GRPO_GUARD:
                gamma[i] = k.sigma * k.omega / dt_i
            valid[i] = True
        elif name == MethodName.VGG_FLOW:
            gamma[i] = (1.0 - t_i) ** 2 * k.delta
            c1[i] = 1.0 / (d * k.delta**2)
            valid[i] = True
        elif name == MethodName.SQDF:
            if k.sigma <= 0.0:
                continue
            gamma[i] = sqdf_gamma_base ** (n * t_i)
            c1[i] = std_c1(k)
            valid[i] = True
        elif name == MethodName.RESIDUAL_NABLA_DB:
            if flow is None:
                raise ConfigError("residual_nabla_db needs the VP flow for its signal levels")
            if k.sigma <= 0.0:
                continue
            abar_i = flow.alpha_bar(t_i)
            abar_im1 = flow.alpha_bar(float(grid.times[i - 1]))
            gamma[i] = abar_im1
            c1[i] = k.omega**2 / (d * k.sigma**4)
            c2_const[i] = (1.0 - abar_i) * k.sigma**4 / k.omega**2 * resdb_wr_over_wf
            valid[i] = True
        elif name == MethodName.CUSTOM:
            raise ConfigError("custom rows are built directly, not via the registry")
        else:  # pragma: no cover
            raise ConfigError(f"unhandled method {name}")

    if name == MethodName.PCPO_REWEIGHT_DIFFUSION:
        sp = np.asarray(
            sigma_prime
            if sigma_prime is not None
            else [k.sigma if k else np.nan for k in kernels],
            dtype=np.float64,
        )
        h_override = np.where(valid, 0.5 * sp * w_prime, np.nan)

    estimator = {
        MethodName.VGG_FLOW: EstimatorKind.CURRENT_STATE_FO,
        MethodName.SQDF: EstimatorKind.LOOKAHEAD_FO,
        MethodName.RESIDUAL_NABLA_DB: EstimatorKind.LOOKAHEAD_FO,
    }.get(name, EstimatorKind.LOOKAHEAD_ZO)
    lookahead = {
        MethodName.VGG_FLOW: LookaheadRule.CURRENT,
        MethodName.SQDF: LookaheadRule.ONE_STEP,
        MethodName.RESIDUAL_NABLA_DB: LookaheadRule.ONE_STEP,
    }.get(name, LookaheadRule.TERMINAL)
    branching = name in (MethodName.BRANCH_GRPO, MethodName.TEMPFLOW_GRPO)
    if clip is None:
        if name in (
            MethodName.PPO_GRPO,
            MethodName.PCPO_BASE,
            MethodName.PCPO_REWEIGHT_DIFFUSION,
            MethodName.PCPO_REWEIGHT_FLOW,
            MethodName.BRANCH_GRPO,
        ):
            clip = ClipRule(kind="ppo_hinge", xi=0.05)
        elif name == MethodName.TEMPFLOW_GRPO:
            clip = ClipRule(kind="fair_clip", xi=0.05)
        elif name == MethodName.GRPO_GUARD:
            clip = ClipRule(kind="guard_centered", xi=0.05)
        else:
            clip = ClipRule(kind="none")

    if not np.any(valid):
        raise ConfigError(f"{name.value}: no step of the schedule supports this method")
    return MethodConfig(
        name=name,
        estimator=estimator,
        lookahead=lookahead,
        branching=branching,
        alpha=alpha,
        gamma=gamma,
        c1=c1,
        c2_const=c2_const,
        c2_rcoef=c2_rcoef,
        valid=valid,
        times=np.asarray(grid.times),
        deltas=np.asarray(grid.deltas),
        clip=clip,
        h_override=h_override,
    )


def custom_config(
    grid: TimeGrid,
    alpha: float,
    estimator: EstimatorKind | str,
    lookahead: LookaheadRule | str,
    gamma: np.ndarray,
    c1: np.ndarray,
    c2_const: Optional[np.ndarray] = None,
    c2_rcoef: Optional[np.ndarray] = None,
    clip: Optional[ClipRule] = None,
    branching: bool = False,
) -> MethodConfig:
    """A hand-built registry row (per-step tables supplied by the caller)."""
    n = grid.n_steps
    gamma = np.asarray(gamma, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    if gamma.shape != (n + 1,) or c1.shape != (n + 1,):
        raise ConfigError("per-step tables must have length n_steps + 1")
    valid = np.isfinite(gamma) & np.isfinite(c1)
    if np.any(c1[valid] <= 0):
        raise ConfigError("c1 must be positive on valid steps")
    return MethodConfig(
        name=MethodName.CUSTOM,
        estimator=EstimatorKind(estimator),
        lookahead=LookaheadRule(lookahead),
        branching=branching,
        alpha=alpha,
        gamma=gamma,
        c1=c1,
        c2_const=np.zeros(n + 1) if c2_const is None else np.asarray(c2_const, dtype=np.float64),
        c2_rcoef=np.zeros(n + 1) if c2_rcoef is None else np.asarray(c2_rcoef, dtype=np.float64),
        valid=valid,
        times=np.asarray(grid.times),
        deltas=np.asarray(grid.deltas),
        clip=clip if clip is not None else ClipRule(kind="none"),
    )


def schedule_rows(
    method: MethodConfig,
    kernels: Sequence[Optional[KernelCoeffs]],
    reward_value: float = 1.0,
) -> list[dict]:
    """Per-step schedule table for CSV / plot dumps.

    The c2 column is evaluated at the given reward value (registry rows with
    reward-dependent anchors are curves in r, collapsed here for plotting).
    """
    rows = []
    for i in method.valid_steps():
        k = kernels[i]
        rows.append(
            {
                "method": method.name.value,
                "step": int(i),
                "t": float(method.times[i]),
                "gamma": float(method.gamma[i]),
                "c1": float(method.c1[i]),
                "c2": method.c2(i, reward_value),
                "h": influence_h(method, k, i),
                "w": sampler_weight(k) if k.sigma > 0 else float("nan"),
                "omega": k.omega,
                "sigma": k.sigma,
                "delta": k.delta,
            }
        )
    return rows
