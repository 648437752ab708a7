"""Affine flow schedules and discrete reverse-kernel coefficients.

Conventions used throughout the package:

* t=0 is clean data, t=1 is pure noise.
* The forward marginal is x_t = a_t x_0 + b_t x_1 with x_1 ~ N(0, I).
* One reverse step from t_i to t_{i-1} is Gaussian,
  N(kappa x_t + omega s_t, sigma^2 I), where s_t is the score at (x_t, t_i)
  and sigma = sigma_tilde * sqrt(dt) is the discrete step noise.
* delta is the signed scalar converting a network-native output difference
  into a score difference: -delta * (eps_a - eps_b) = s_a - s_b for
  eps-prediction, and -delta * (v_a - v_b) = s_a - s_b for v-prediction.
* w = omega * delta / sigma is the sampler weight; it is defined only on
  stochastic steps.

Schedules:

* VP:  a_t = sqrt(abar_t), b_t = sqrt(1 - abar_t) with
       abar_t = exp(-int_0^t beta(s) ds) and a linear beta(s).
* VE:  a_t = 1, b_t = sigma_min (sigma_max / sigma_min)^t.
* RectifiedFlow: a_t = 1 - t, b_t = t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DomainError,
    InvalidNoiseError,
    SingularityError,
    UndefinedWeightError,
)

# Resolution of the tabulated VP integral of beta.
_VP_TABLE_POINTS = 10_001


class FlowKind(str, Enum):
    VP = "vp"
    VE = "ve"
    RECTIFIED_FLOW = "rf"


@dataclass(frozen=True)
class FlowSpec:
    """An affine conditional flow: the pair (a_t, b_t) over t in [0, 1].

    For VP the cumulative integral of the linear beta schedule is tabulated
    by trapezoid quadrature on a uniform grid of 10_001 points and abar_t is
    linearly interpolated between nodes; the quadrature is exact for a
    linear integrand so the table only matters between nodes.
    """

    kind: FlowKind
    vp_beta: tuple[float, float] = (0.1, 20.0)
    ve_sigma: tuple[float, float] = (0.01, 50.0)
    _vp_ts: np.ndarray = field(init=False, repr=False, compare=False, default=None)
    _vp_abar: np.ndarray = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "kind", FlowKind(self.kind))
        if self.kind == FlowKind.VP:
            bmin, bmax = self.vp_beta
            if bmin < 0 or bmax < bmin:
                raise DomainError(f"invalid beta range {self.vp_beta}")
            ts = np.linspace(0.0, 1.0, _VP_TABLE_POINTS)
            betas = bmin + ts * (bmax - bmin)
            # cumulative trapezoid of beta; exact at nodes for linear beta
            integral = np.concatenate(
                [[0.0], np.cumsum(0.5 * (betas[1:] + betas[:-1]) * np.diff(ts))]
            )
            object.__setattr__(self, "_vp_ts", ts)
            object.__setattr__(self, "_vp_abar", np.exp(-integral))
        elif self.kind == FlowKind.VE:
            smin, smax = self.ve_sigma
            if smin <= 0 or smax <= smin:
                raise DomainError(f"invalid VE sigma range {self.ve_sigma}")

    def beta(self, t: float) -> float:
        """Instantaneous VP noise rate beta(t) = beta_min + t (beta_max - beta_min)."""
        if self.kind != FlowKind.VP:
            raise ContractError("beta(t) is defined for VP flows only")
        bmin, bmax = self.vp_beta
        return bmin + t * (bmax - bmin)

    def alpha_bar(self, t: float) -> float:
        """VP signal level abar_t = exp(-int_0^t beta)."""
        if self.kind != FlowKind.VP:
            raise ContractError("alpha_bar(t) is defined for VP flows only")
        _check_unit_interval(t)
        return float(np.interp(t, self._vp_ts, self._vp_abar))


def _check_unit_interval(t: float) -> None:
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"t={t} outside [0, 1]")


def ab_coeffs(flow: FlowSpec, t: float) -> tuple[float, float, float, float]:
    """Return (a_t, b_t, da/dt, db/dt) for the flow at time t.

    For VP the time derivative of b diverges at t=0 (b ~ sqrt(t)); inf is
    returned there rather than an error since a and b remain well defined.
    """
    _check_unit_interval(t)
    if flow.kind == FlowKind.RECTIFIED_FLOW:
        return 1.0 - t, t, -1.0, 1.0
    if flow.kind == FlowKind.VE:
        smin, smax = flow.ve_sigma
        ratio = smax / smin
        sig = smin * ratio**t
        return 1.0, sig, 0.0, sig * math.log(ratio)
    abar = flow.alpha_bar(t)
    a = math.sqrt(abar)
    b = math.sqrt(max(1.0 - abar, 0.0))
    beta = flow.beta(t)
    a_dot = -0.5 * beta * a
    b_dot = 0.5 * beta * abar / b if b > 0 else math.inf
    return a, b, a_dot, b_dot


def ab_arrays(flow: FlowSpec, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (a_t, b_t) over an array of times."""
    ts = np.asarray(ts, dtype=np.float64)
    if np.any((ts < 0) | (ts > 1)):
        raise DomainError("times outside [0, 1]")
    if flow.kind == FlowKind.RECTIFIED_FLOW:
        return 1.0 - ts, ts.copy()
    if flow.kind == FlowKind.VE:
        smin, smax = flow.ve_sigma
        return np.ones_like(ts), smin * (smax / smin) ** ts
    abar = np.interp(ts, flow._vp_ts, flow._vp_abar)
    return np.sqrt(abar), np.sqrt(np.clip(1.0 - abar, 0.0, None))


@dataclass(frozen=True)
class TimeGrid:
    """Discretization 0 = t_0 < t_1 < ... < t_N = 1.

    Step i (for i = 1..N) moves from t_i down to t_{i-1} and has width
    deltas[i] = t_i - t_{i-1}; index 0 of per-step arrays is unused.
    """

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise DomainError("grid needs at least two times")
        if not (times[0] == 0.0 and times[-1] == 1.0):
            raise DomainError("grid must start at 0 and end at 1")
        if not np.all(np.diff(times) > 0):
            raise DomainError("grid times must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, n_steps: int) -> "TimeGrid":
        return cls(np.linspace(0.0, 1.0, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def deltas(self) -> np.ndarray:
        """deltas[i] = t_i - t_{i-1}; deltas[0] = 0 (unused slot)."""
        return np.concatenate([[0.0], np.diff(self.times)])


class NoiseRule(str, Enum):
    ODE = "ode"
    CONST_DIFFUSION = "const_diffusion"
    FLOW_GRPO = "flow_grpo"
    DDPM_EQUIVALENT = "ddpm_equivalent"


@dataclass(frozen=True)
class NoiseSpec:
    """Maps a step index to the instantaneous and discrete step noise.

    * ODE: sigma == 0 everywhere.
    * CONST_DIFFUSION(a): sigma_tilde = a.
    * FLOW_GRPO(a): sigma_tilde = a sqrt(t / (1 - t)) (rectified flow only).
    * DDPM_EQUIVALENT: ancestral (eta=1) DDIM noise,
      sigma_i^2 = (1 - abar_{i-1}) / (1 - abar_i) * (1 - abar_i / abar_{i-1}).
    """

    rule: NoiseRule
    a: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rule", NoiseRule(self.rule))
        if self.rule in (NoiseRule.CONST_DIFFUSION, NoiseRule.FLOW_GRPO) and self.a <= 0:
            raise DomainError("diffusion scale a must be positive")

    def step_sigmas(self, i: int, grid: TimeGrid, flow: FlowSpec) -> tuple[float, float]:
        """Return (sigma_tilde_i, sigma_i) with sigma_i = sigma_tilde_i sqrt(dt_i)."""
        if not (1 <= i <= grid.n_steps):
            raise DomainError(f"step index {i} outside 1..{grid.n_steps}")
        dt = grid.times[i] - grid.times[i - 1]
        t = grid.times[i]
        if self.rule == NoiseRule.ODE:
            return 0.0, 0.0
        if self.rule == NoiseRule.CONST_DIFFUSION:
            return self.a, self.a * math.sqrt(dt)
        if self.rule == NoiseRule.FLOW_GRPO:
            if t >= 1.0:
                raise SingularityError("flow-grpo noise diverges at t=1")
            st = self.a * math.sqrt(t / (1.0 - t))
            return st, st * math.sqrt(dt)
        abar_i = flow.alpha_bar(t)
        abar_im1 = flow.alpha_bar(grid.times[i - 1])
        var = (1.0 - abar_im1) / (1.0 - abar_i) * (1.0 - abar_i / abar_im1)
        sig = math.sqrt(max(var, 0.0))
        return sig / math.sqrt(dt), sig


@dataclass(frozen=True)
class KernelCoeffs:
    """Coefficients of one discrete reverse step N(kappa x + omega s, sigma^2 I).

    delta converts the native parameterization difference into a score
    difference; w = omega * delta / sigma exists only when sigma > 0.
    """

    kappa: float
    omega: float
    sigma: float
    delta: float

    def __post_init__(self):
        if self.sigma < 0:
            raise DomainError("sigma must be nonnegative")
        if not math.isfinite(self.omega):
            raise DomainError("omega must be finite")

    @property
    def w(self) -> float:
        return sampler_weight(self)


def sampler_weight(coeffs: KernelCoeffs) -> float:
    """Sampler weight w = omega * delta / sigma; undefined on deterministic steps."""
    if coeffs.sigma <= 0.0:
        raise UndefinedWeightError("w = omega*delta/sigma undefined when sigma == 0")
    return coeffs.omega * coeffs.delta / coeffs.sigma


def ddim_kernel(alpha_bar_i: float, alpha_bar_im1: float, sigma_i: float) -> KernelCoeffs:
    """Reverse-kernel coefficients of a DDIM step on a VP schedule.

    kappa = sqrt(abar_{i-1} / abar_i)
    omega = (kappa sqrt(1 - abar_i) - sqrt(1 - abar_{i-1} - sigma^2)) sqrt(1 - abar_i)
    delta = 1 / sqrt(1 - abar_i)   (eps-prediction)
    """
    if not (0.0 < alpha_bar_i <= alpha_bar_im1 <= 1.0):
        raise DomainError(
            f"need 0 < abar_i <= abar_(i-1) <= 1, got ({alpha_bar_i}, {alpha_bar_im1})"
        )
    if sigma_i < 0:
        raise InvalidNoiseError("sigma must be nonnegative")
    resid = 1.0 - alpha_bar_im1 - sigma_i**2
    if resid < -1e-15:
        raise InvalidNoiseError(
            f"sigma^2={sigma_i**2} exceeds 1 - abar_(i-1)={1.0 - alpha_bar_im1}"
        )
    resid = max(resid, 0.0)
    b_i = math.sqrt(1.0 - alpha_bar_i)
    if b_i == 0.0:
        raise SingularityError("DDIM kernel undefined at abar_i = 1 (b_i = 0)")
    kappa = math.sqrt(alpha_bar_im1 / alpha_bar_i)
    omega = (kappa * b_i - math.sqrt(resid)) * b_i
    return KernelCoeffs(kappa=kappa, omega=omega, sigma=sigma_i, delta=1.0 / b_i)


def dpmpp_kernel(alpha_bar_i: float, alpha_bar_im1: float) -> KernelCoeffs:
    """Reverse-kernel coefficients of a first-order SDE-DPM-Solver++ step (VP).

    With a = sqrt(abar), b = sqrt(1-abar), log-SNR lam = log(a/b) and
    h = lam_{i-1} - lam_i:

    kappa   = (b_{i-1}/b_i) e^{-h} + (a_{i-1}/a_i)(1 - e^{-2h})
    omega   = (a_{i-1}/a_i)(1 - e^{-2h}) b_i^2
    sigma^2 = b_{i-1}^2 (1 - e^{-2h})
    delta   = 1 / b_i   (eps-prediction)
    """
    if not (0.0 < alpha_bar_i <= alpha_bar_im1 <= 1.0):
        raise DomainError(
            f"need 0 < abar_i <= abar_(i-1) <= 1, got ({alpha_bar_i}, {alpha_bar_im1})"
        )
    a_i = math.sqrt(alpha_bar_i)
    b_i = math.sqrt(1.0 - alpha_bar_i)
    a_p = math.sqrt(alpha_bar_im1)
    b_p = math.sqrt(1.0 - alpha_bar_im1)
    if b_i == 0.0:
        raise SingularityError("DPM++ kernel undefined at abar_i = 1")
    if b_p == 0.0:
        # terminal boundary: zero remaining noise, h -> inf
        return KernelCoeffs(
            kappa=a_p / a_i, omega=(a_p / a_i) * b_i**2, sigma=0.0, delta=1.0 / b_i
        )
    h = math.log(a_p / b_p) - math.log(a_i / b_i)
    one_m = -math.expm1(-2.0 * h)  # 1 - e^{-2h}
    kappa = (b_p / b_i) * math.exp(-h) + (a_p / a_i) * one_m
    omega = (a_p / a_i) * one_m * b_i**2
    sigma = b_p * math.sqrt(max(one_m, 0.0))
    return KernelCoeffs(kappa=kappa, omega=omega, sigma=sigma, delta=1.0 / b_i)


def euler_rf_kernel(t_i: float, dt: float, sigma_tilde: float) -> KernelCoeffs:
    """Reverse-kernel coefficients of an Euler step of the rectified-flow SDE.

    kappa = 1 + dt/(1-t),  omega = t dt/(1-t) + sigma^2/2  with
    sigma = sigma_tilde sqrt(dt), and delta = (1-t)/t (v-prediction).
    """
    if t_i <= 0.0 or t_i >= 1.0:
        raise SingularityError(f"Euler RF kernel singular at t={t_i}")
    if not (0.0 < dt <= t_i):
        raise DomainError(f"need 0 < dt <= t_i, got dt={dt}, t_i={t_i}")
    if sigma_tilde < 0:
        raise InvalidNoiseError("sigma_tilde must be nonnegative")
    sigma = sigma_tilde * math.sqrt(dt)
    kappa = 1.0 + dt / (1.0 - t_i)
    omega = t_i * dt / (1.0 - t_i) + 0.5 * sigma**2
    delta = (1.0 - t_i) / t_i
    return KernelCoeffs(kappa=kappa, omega=omega, sigma=sigma, delta=delta)


class SamplerFamily(str, Enum):
    DDIM = "ddim"
    DPMPP = "dpmpp"
    EULER_RF = "euler_rf"


def kernel_schedule(
    flow: FlowSpec,
    grid: TimeGrid,
    noise: NoiseSpec,
    family: SamplerFamily | str,
    stochastic_mask: Optional[Sequence[bool]] = None,
    steps: Optional[Iterable[int]] = None,
) -> list[Optional[KernelCoeffs]]:
    """Tabulate per-step kernel coefficients for a sampler run.

    Returns a list of length N+1 indexed by step; entry 0 and any step not in
    `steps` are None.  A step masked off in `stochastic_mask` uses sigma = 0
    (its omega changes accordingly for DDIM / DPM++).
    """
    family = SamplerFamily(family)
    n = grid.n_steps
    if stochastic_mask is None:
        stochastic_mask = [True] * (n + 1)
    if len(stochastic_mask) != n + 1:
        raise ContractError("stochastic_mask must have length n_steps + 1")
    if steps is None:
        steps = range(1, n + 1)
    out: list[Optional[KernelCoeffs]] = [None] * (n + 1)
    for i in steps:
        t_i = grid.times[i]
        t_im1 = grid.times[i - 1]
        _, sigma = noise.step_sigmas(i, grid, flow)
        if not stochastic_mask[i]:
            sigma = 0.0
        if family == SamplerFamily.EULER_RF:
            if flow.kind != FlowKind.RECTIFIED_FLOW:
                raise ContractError("euler_rf kernels need a rectified flow")
            sig_tilde = sigma / math.sqrt(t_i - t_im1)
            out[i] = euler_rf_kernel(t_i, t_i - t_im1, sig_tilde)
            continue
        if flow.kind != FlowKind.VP:
            raise ContractError(f"{family.value} kernels need a VP flow")
        abar_i = flow.alpha_bar(t_i)
        abar_im1 = flow.alpha_bar(t_im1)
        if family == SamplerFamily.DDIM:
            out[i] = ddim_kernel(abar_i, abar_im1, sigma)
        else:
            out[i] = dpmpp_kernel(abar_i, abar_im1)
    return out
