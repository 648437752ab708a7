"""Score network, denoising pretraining, and the fine-tuning loop.

The network is a fixed small MLP with hand-rolled reverse-mode gradients:
input (x in R^2, 4 sin/cos time-feature pairs at geometric frequencies),
two tanh hidden layers of width 64, linear head predicting the forward
noise (eps-prediction).  Scores come out of the conversion s = -eps / b_t.

Pretraining regresses eps on noisy mixture samples.  Fine-tuning runs the
unified objective of rsm_objective with any registry row: collect grouped
rollouts under the frozen collection policy, form the per-step guidance
estimate, gate it through the clip rule, and step with Adam.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DomainError, TrainingError
from .flow_schedules import FlowSpec, TimeGrid, ab_arrays
from .mixture_oracle import GaussianMixture, LinearReward, sample
from .estimators import StatsMode, reward_stats
from .rsm_objective import (
    ClipKind,
    EstimatorKind,
    MethodConfig,
    apply_clip,
    canonical_gradient,
)
from .sampler import RolloutPlan

_HIDDEN = 64
_N_FREQS = 4


def _time_features(t: np.ndarray) -> np.ndarray:
    """4 sin/cos pairs at geometric frequencies pi * 2^k, k = 0..3."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.pi * (2.0 ** np.arange(_N_FREQS))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ScoreNet:
    """Fixed-architecture eps-prediction MLP over a flat parameter vector."""

    IN = 2 + 2 * _N_FREQS
    SHAPES = (
        (_HIDDEN, 2 + 2 * _N_FREQS),
        (_HIDDEN,),
        (_HIDDEN, _HIDDEN),
        (_HIDDEN,),
        (2, _HIDDEN),
        (2,),
    )

    def __init__(self, seed: int = 0, params: Optional[np.ndarray] = None):
        if params is not None:
            params = np.asarray(params, dtype=np.float64).copy()
            if params.shape != (self.n_params(),):
                raise DomainError(f"expected {self.n_params()} parameters")
            self.params = params
            return
        rng = np.random.default_rng(seed)
        chunks = []
        for shape in self.SHAPES:
            if len(shape) == 2:
                fan_in = shape[1]
                chunks.append(rng.standard_normal(shape).ravel() / math.sqrt(fan_in))
            else:
                chunks.append(np.zeros(shape))
        self.params = np.concatenate(chunks)

    @classmethod
    def n_params(cls) -> int:
        return sum(int(np.prod(s)) for s in cls.SHAPES)

    def _unpack(self, params: Optional[np.ndarray] = None):
        p = self.params if params is None else params
        out, idx = [], 0
        for shape in self.SHAPES:
            size = int(np.prod(shape))
            out.append(p[idx : idx + size].reshape(shape))
            idx += size
        return out

    def copy(self) -> "ScoreNet":
        return ScoreNet(params=self.params)

    def forward(self, x: np.ndarray, t: np.ndarray, cache: bool = False):
        """eps-prediction at states x (B, 2) and times t (B,)."""
        w1, b1, w2, b2, w3, b3 = self._unpack()
        u = np.concatenate([np.asarray(x, dtype=np.float64), _time_features(t)], axis=1)
        z1 = u @ w1.T + b1
        a1 = np.tanh(z1)
        z2 = a1 @ w2.T + b2
        a2 = np.tanh(z2)
        out = a2 @ w3.T + b3
        if cache:
            return out, (u, a1, a2)
        return out

    def backward(self, cache, d_out: np.ndarray) -> np.ndarray:
        """Parameter gradient for sum(d_out * output); one reverse pass."""
        u, a1, a2 = cache
        _, _, w2, _, w3, _ = self._unpack()
        d_w3 = d_out.T @ a2
        d_b3 = d_out.sum(axis=0)
        d_a2 = d_out @ w3
        d_z2 = d_a2 * (1.0 - a2 * a2)
        d_w2 = d_z2.T @ a1
        d_b2 = d_z2.sum(axis=0)
        d_a1 = d_z2 @ w2
        d_z1 = d_a1 * (1.0 - a1 * a1)
        d_w1 = d_z1.T @ u
        d_b1 = d_z1.sum(axis=0)
        return np.concatenate(
            [d_w1.ravel(), d_b1, d_w2.ravel(), d_b2, d_w3.ravel(), d_b3]
        )

    def to_json(self) -> str:
        header = {
            "arch": {"hidden": _HIDDEN, "n_freqs": _N_FREQS, "input": self.IN},
            "params": self.params.tolist(),
        }
        return json.dumps(header)

    @classmethod
    def from_json(cls, text: str) -> "ScoreNet":
        payload = json.loads(text)
        arch = payload["arch"]
        if arch != {"hidden": _HIDDEN, "n_freqs": _N_FREQS, "input": cls.IN}:
            raise DomainError(f"checkpoint architecture mismatch: {arch}")
        return cls(params=np.asarray(payload["params"], dtype=np.float64))


@dataclass
class NetScoreField:
    """ScoreField backed by an eps-prediction net: s = -eps_hat / b_t."""

    net: ScoreNet
    flow: FlowSpec
    grid: TimeGrid

    def __call__(self, x: np.ndarray, i: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 2)
        t = float(self.grid.times[i])
        _, b = ab_arrays(self.flow, np.array([t]))
        if b[0] <= 0:
            raise ContractError("score undefined at b_t = 0; query t > 0")
        eps = self.net.forward(flat, np.full(flat.shape[0], t))
        return (-eps / b[0]).reshape(x.shape)


class Adam:
    """Plain Adam on a flat vector."""

    def __init__(self, n: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for pretraining and fine-tuning."""

    batch: int = 4096
    iters: int = 2000
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    n_train_times: int = 500
    seed: int = 0
    # fine-tuning only
    group_size: int = 1
    updates_per_batch: int = 1
    stats_mode: StatsMode = StatsMode.CENTERED
    eval_every: int = 10
    eval_n: int = 2048

    def __post_init__(self):
        if self.batch <= 0 or self.iters < 0:
            raise DomainError("batch and iters must be positive")
        object.__setattr__(self, "stats_mode", StatsMode(self.stats_mode))


def pretrain(
    net: ScoreNet,
    ref: GaussianMixture,
    flow: FlowSpec,
    cfg: TrainConfig,
) -> tuple[ScoreNet, list[float]]:
    """Denoising pretraining: regress the forward noise on mixture samples.

    Times are drawn uniformly from the n_train_times-point grid {i/n}_{i>=1}.
    Returns the trained net and the per-iteration loss curve.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.n_params(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    losses: list[float] = []
    last_good = net.params.copy()
    for _ in range(cfg.iters):
        x0 = sample(ref, cfg.batch, rng)
        idx = rng.integers(1, cfg.n_train_times + 1, size=cfg.batch)
        t = idx / cfg.n_train_times
        a, b = ab_arrays(flow, t)
        eps = rng.standard_normal((cfg.batch, 2))
        x_t = a[:, None] * x0 + b[:, None] * eps
        pred, cache = net.forward(x_t, t, cache=True)
        resid = pred - eps
        with np.errstate(over="ignore"):
            loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not math.isfinite(loss):
            raise TrainingError("pretraining loss diverged", last_good=last_good)
        losses.append(loss)
        grad = net.backward(cache, 2.0 * resid / cfg.batch)
        last_good = net.params
        net.params = opt.step(net.params, grad)
    return net, losses


def grad_check(
    net: ScoreNet,
    loss_fn: Callable[[ScoreNet], float],
    grad_fn: Callable[[ScoreNet], np.ndarray],
    n_params_sampled: int = 24,
    fd_step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error of the analytic gradient vs central differences on
    a random parameter subset.  Returns 0.0 for an empty subset."""
    if n_params_sampled == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    idx = rng.choice(net.n_params(), size=min(n_params_sampled, net.n_params()), replace=False)
    analytic = grad_fn(net)
    worst = 0.0
    base = net.params.copy()
    for k in idx:
        net.params = base.copy()
        net.params[k] += fd_step
        up = loss_fn(net)
        net.params = base.copy()
        net.params[k] -= fd_step
        down = loss_fn(net)
        fd = (up - down) / (2 * fd_step)
        denom = max(abs(analytic[k]), abs(fd), 1e-10)
        worst = max(worst, abs(analytic[k] - fd) / denom)
    net.params = base
    return worst


def sample_terminal(
    field, plan: RolloutPlan, n: int, seed: int, return_trace: bool = False
):
    """n vectorized reverse paths from the standard-normal prior to t=0.

    Returns x0 (n, 2); with return_trace also the per-step states and the
    injected noises (dicts keyed by step index).
    """
    rng = np.random.default_rng(seed)
    n_steps = plan.grid.n_steps
    x = rng.standard_normal((n, 2))
    states: dict[int, np.ndarray] = {}
    noises: dict[int, np.ndarray] = {}
    for i in range(n_steps, 0, -1):
        k = plan.kernels[i]
        states[i] = x
        s = field(x, i)
        mean = k.kappa * x + k.omega * s
        if k.sigma > 0:
            eps = rng.standard_normal((n, 2))
            noises[i] = eps
            x = mean + k.sigma * eps
        else:
            x = mean
    if return_trace:
        return x, states, noises
    return x


def eval_reward(
    net: ScoreNet, plan: RolloutPlan, n: int, reward: LinearReward, seed: int = 0
) -> tuple[float, float]:
    """Mean terminal reward under the net's sampler, with its standard error."""
    if n <= 0:
        raise DomainError("eval sample count must be positive")
    field = NetScoreField(net=net, flow=plan.flow, grid=plan.grid)
    x0 = sample_terminal(field, plan, n, seed)
    r = reward(x0)
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(n))


def _tweedie_grad_rows(field, x_rows, i, flow, grid, slope, fd_step=1e-4):
    """grad_x (slope . posterior-mean(x)) at a batch of rows, by central FD."""
    a, b = ab_arrays(flow, np.array([float(grid.times[i])]))
    a, b = float(a[0]), float(b[0])
    h = fd_step
    grads = np.empty_like(x_rows)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        sp = field(x_rows + e, i)
        sm = field(x_rows - e, i)
        xp = (x_rows + e + b * b * sp) / a
        xm = (x_rows - e + b * b * sm) / a
        grads[:, d] = ((xp - xm) / (2 * h)) @ slope
    return grads


def rsm_finetune(
    net_ref: ScoreNet,
    net: ScoreNet,
    reward: LinearReward,
    method: MethodConfig,
    plan: RolloutPlan,
    cfg: TrainConfig,
) -> tuple[ScoreNet, list[dict]]:
    """Fine-tune `net` (initialized from net_ref) with a registry row.

    Each epoch collects cfg.batch groups of cfg.group_size trajectories
    under the frozen collection policy, computes the per-step guidance
    estimate prescribed by the method (zeroth-order terminal, one-step
    first-order, or current-state first-order), gates rows through the clip
    rule, and applies cfg.updates_per_batch Adam steps of the unified loss.

    Returns the trained net and per-epoch metrics rows
    (epoch, reward_mean, reward_se, kl_proxy, drift, clip_fraction).
    """
    n_steps = plan.grid.n_steps
    alpha = method.alpha
    opt = Adam(net.n_params(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    ref_field = NetScoreField(net=net_ref, flow=plan.flow, grid=plan.grid)
    valid = [int(i) for i in method.valid_steps() if plan.kernels[i] is not None]
    a_tab, b_tab = ab_arrays(plan.flow, plan.grid.times)
    metrics: list[dict] = []
    last_good = net.params.copy()
    rng = np.random.default_rng(cfg.seed)

    for epoch in range(cfg.iters):
        collect_net = net.copy()  # theta-dagger: the data-collecting policy
        old_field = NetScoreField(net=collect_net, flow=plan.flow, grid=plan.grid)
        n_traj = cfg.batch * cfg.group_size
        seed = int(rng.integers(2**62))
        x0, states, noises = _collect_grouped(
            old_field, plan, cfg.batch, cfg.group_size, seed
        )
        r_raw = reward(x0)
        if cfg.group_size > 1:
            groups = r_raw.reshape(cfg.batch, cfg.group_size)
            adv = np.concatenate(
                [reward_stats(g, cfg.stats_mode).terms for g in groups]
            )
        else:
            adv = reward_stats(r_raw, cfg.stats_mode).terms

        clip_hits = 0
        clip_total = 0
        for upd in range(cfg.updates_per_batch):
            grad = np.zeros(net.n_params())
            n_rows = sum(states[i].shape[0] for i in valid if i in states)
            kl_proxy = 0.0
            drift = 0.0
            for i in valid:
                if i not in states:
                    continue
                k = plan.kernels[i]
                x_rows = states[i]
                t_i = float(plan.grid.times[i])
                b_i = b_tab[i]
                ts = np.full(x_rows.shape[0], t_i)
                eps_pred, cache = net.forward(x_rows, ts, cache=True)
                s_theta = -eps_pred / b_i
                s_ref = -net_ref.forward(x_rows, ts) / b_i
                s_old = (
                    s_theta
                    if upd == 0
                    else -collect_net.forward(x_rows, ts) / b_i
                )

                psi_hat = _psi_rows(
                    method, plan, old_field, i, x_rows, states, noises, adv, reward, alpha
                )
                psi = method.gamma[i] * psi_hat
                c2 = method.c2_const[i] + method.c2_rcoef[i] * adv

                # at the first strictly-on-policy update every ratio is 1,
                # so no rule can clip
                if method.clip.kind != ClipKind.NONE and upd > 0 and i in noises:
                    mu_theta = k.kappa * x_rows + k.omega * s_theta
                    mu_old = k.kappa * x_rows + k.omega * s_old
                    keep = _clip_rows(
                        method, mu_theta, mu_old, k, float(plan.grid.deltas[i]), adv, noises[i]
                    )
                    psi = psi * keep[:, None]
                    c2 = c2 * keep
                    clip_hits += int(np.sum(~keep.astype(bool)))
                    clip_total += keep.size

                g_rows = canonical_gradient(s_theta, s_ref, s_old, psi, method.c1[i], c2)
                d_eps = (2.0 * g_rows) * (-1.0 / b_i) / n_rows
                grad += net.backward(cache, d_eps)
                ds = s_theta - s_ref
                kl_proxy += float(
                    np.mean(np.sum(ds * ds, axis=1)) * k.omega**2 / (2 * k.sigma**2)
                ) if k.sigma > 0 else 0.0
                drift += float(np.mean(np.sum(ds * ds, axis=1)) * k.omega**2)

            if not np.all(np.isfinite(grad)):
                raise TrainingError("fine-tuning gradient diverged", last_good=last_good)
            last_good = net.params
            net.params = opt.step(net.params, grad)

        row = {
            "epoch": epoch,
            "reward_mean": float(r_raw.mean()),
            "reward_se": float(r_raw.std(ddof=1) / math.sqrt(n_traj)),
            "kl_proxy": kl_proxy,
            "drift": drift,
            "clip_fraction": clip_hits / clip_total if clip_total else 0.0,
        }
        metrics.append(row)
    return net, metrics


def _collect_grouped(field, plan, n_groups, group_size, seed):
    """Grouped trajectories: members of a group share the prior draw and
    diverge through the per-step noise."""
    rng = np.random.default_rng(seed)
    n_steps = plan.grid.n_steps
    prior = rng.standard_normal((n_groups, 2))
    x = np.repeat(prior, group_size, axis=0)
    states: dict[int, np.ndarray] = {}
    noises: dict[int, np.ndarray] = {}
    for i in range(n_steps, 0, -1):
        k = plan.kernels[i]
        states[i] = x
        s = field(x, i)
        mean = k.kappa * x + k.omega * s
        if k.sigma > 0:
            eps = rng.standard_normal(x.shape)
            noises[i] = eps
            x = mean + k.sigma * eps
        else:
            x = mean
    return x, states, noises


def _psi_rows(method, plan, old_field, i, x_rows, states, noises, adv, reward, alpha):
    """Per-row guidance estimate at step i under the collection policy."""
    k = plan.kernels[i]
    if method.estimator == EstimatorKind.LOOKAHEAD_ZO:
        if i not in noises:
            return np.zeros_like(x_rows)
        scale = k.sigma / (alpha * k.omega)
        return scale * adv[:, None] * noises[i]
    if method.estimator == EstimatorKind.CURRENT_STATE_FO:
        grads = _tweedie_grad_rows(old_field, x_rows, i, plan.flow, plan.grid, reward.slope)
        return grads / alpha
    # one-step first-order lookahead: gradient of the posterior-mean reward
    # at the sampled child state
    if i - 1 == 0:
        child_grads = np.tile(reward.slope, (x_rows.shape[0], 1))
    else:
        child = states.get(i - 1)
        if child is None:
            s = old_field(x_rows, i)
            mean = k.kappa * x_rows + k.omega * s
            child = mean + k.sigma * noises[i] if i in noises else mean
        child_grads = _tweedie_grad_rows(
            old_field, child, i - 1, plan.flow, plan.grid, reward.slope
        )
    return (k.sigma**2 / (alpha * k.omega)) * child_grads


def _clip_rows(method, mu_theta, mu_old, k, dt, adv, eps):
    keep = np.ones(mu_theta.shape[0])
    sigma_tilde = k.sigma / math.sqrt(dt)
    for n in range(mu_theta.shape[0]):
        dec = apply_clip(
            method.clip,
            mu_theta[n],
            mu_old[n],
            sigma_tilde,
            dt,
            float(np.sign(adv[n])),
            eps=eps[n],
        )
        if not dec.active:
            keep[n] = 0.0
    return keep
