"""Discrete reverse-time rollouts with branching and recorded noises.

A rollout starts at a state x at step index `start`, applies the per-step
reverse kernels down to the lookahead step j, and records every injected
noise.  Branching spawns K children per node at the chosen steps.  The
resulting BranchTree is the raw material for all value-guidance estimators:
it stores, per leaf, the lookahead state, its posterior-mean projection to
t=0, and optionally a reward value.

Trees are flat arenas (states / step / parent / eps arrays) built level by
level, so score evaluations are batched over the whole frontier.  Noise is
drawn from one deterministic stream per (tree seed, step), and every epsilon
is stored, which makes any child state bit-exactly recomputable from
(parent, eps).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .errors import ContractError, DomainError
from .flow_schedules import (
    FlowSpec,
    KernelCoeffs,
    NoiseSpec,
    SamplerFamily,
    TimeGrid,
    ab_coeffs,
    kernel_schedule,
)
from .mixture_oracle import GaussianMixture, marginal_at, score, tweedie


class ScoreField(Protocol):
    """Evaluation contract: (states with shape (..., 2), step index) -> scores.

    Implementations must be deterministic given (x, i) and safe for
    concurrent readers.
    """

    def __call__(self, x: np.ndarray, i: int) -> np.ndarray: ...


@dataclass(frozen=True)
class OracleScoreField:
    """Exact score of a mixture's noised marginal at each grid time."""

    mixture: GaussianMixture
    flow: FlowSpec
    grid: TimeGrid
    _marginals: dict = field(default_factory=dict, repr=False, compare=False)

    def __call__(self, x: np.ndarray, i: int) -> np.ndarray:
        marg = self._marginals.get(i)
        if marg is None:
            marg = marginal_at(self.mixture, self.flow, float(self.grid.times[i]))
            self._marginals[i] = marg
        return score(marg, x)

    def tweedie_jacobian(self, x: np.ndarray, i: int) -> Optional[np.ndarray]:
        """Closed-form posterior-mean Jacobian, available for one component.

        For a single Gaussian the posterior mean is affine in x with Jacobian
        (a var / (a^2 var + b^2)) I; mixtures return None.
        """
        if self.mixture.n_components != 1:
            return None
        a, b, _, _ = ab_coeffs(self.flow, float(self.grid.times[i]))
        v = self.mixture.component_var
        return (a * v / (a * a * v + b * b)) * np.eye(2)


class CountingScoreField:
    """Wraps a field and counts evaluated rows (the NFE unit)."""

    def __init__(self, inner: ScoreField):
        self.inner = inner
        self.nfe = 0

    def __call__(self, x: np.ndarray, i: int) -> np.ndarray:
        x = np.asarray(x)
        self.nfe += 1 if x.ndim == 1 else x.reshape(-1, 2).shape[0]
        return self.inner(x, i)


@dataclass(frozen=True)
class RolloutPlan:
    """Everything a rollout needs: grid, noise rule, per-step kernels,
    stochasticity mask, branch widths, and the lookahead step.

    Per-step arrays are indexed by step i in 1..N (index 0 unused).
    lookahead 0 means a full rollout to the terminal sample.
    """

    flow: FlowSpec
    grid: TimeGrid
    noise: NoiseSpec
    family: SamplerFamily
    stochastic: np.ndarray
    branch_widths: np.ndarray
    lookahead: int
    kernels: tuple

    @classmethod
    def build(
        cls,
        flow: FlowSpec,
        grid: TimeGrid,
        noise: NoiseSpec,
        family: SamplerFamily | str = SamplerFamily.DDIM,
        stochastic_mask: Optional[Sequence[bool]] = None,
        branch_widths: Optional[Sequence[int]] = None,
        lookahead: int = 0,
        steps: Optional[Sequence[int]] = None,
    ) -> "RolloutPlan":
        n = grid.n_steps
        family = SamplerFamily(family)
        stoch = (
            np.ones(n + 1, dtype=bool)
            if stochastic_mask is None
            else np.asarray(stochastic_mask, dtype=bool)
        )
        widths = (
            np.ones(n + 1, dtype=np.int64)
            if branch_widths is None
            else np.asarray(branch_widths, dtype=np.int64)
        )
        if stoch.shape != (n + 1,) or widths.shape != (n + 1,):
            raise ContractError("per-step arrays must have length n_steps + 1")
        if np.any(widths < 1):
            raise DomainError("branch widths must be >= 1")
        if not (0 <= lookahead <= n):
            raise DomainError(f"lookahead {lookahead} outside 0..{n}")
        kernels = kernel_schedule(flow, grid, noise, family, stochastic_mask=stoch, steps=steps)
        for i in range(1, n + 1):
            k = kernels[i]
            if k is not None and widths[i] > 1 and k.sigma == 0.0:
                raise ContractError(f"branching at deterministic step {i} (sigma = 0)")
        stoch.setflags(write=False)
        widths.setflags(write=False)
        return cls(
            flow=flow,
            grid=grid,
            noise=noise,
            family=family,
            stochastic=stoch,
            branch_widths=widths,
            lookahead=lookahead,
            kernels=tuple(kernels),
        )

    def ab_at(self, i: int) -> tuple[float, float]:
        a, b, _, _ = ab_coeffs(self.flow, float(self.grid.times[i]))
        return a, b


def reverse_step(
    x: np.ndarray,
    coeffs: KernelCoeffs,
    s: np.ndarray,
    eps: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One reverse transition: kappa x + omega s (+ sigma eps on stochastic steps).

    eps must be supplied exactly when coeffs.sigma > 0.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if coeffs.sigma > 0.0:
        if eps is None:
            raise ContractError("stochastic step requires eps")
        return coeffs.kappa * x + coeffs.omega * s + coeffs.sigma * np.asarray(eps)
    if eps is not None:
        raise ContractError("eps supplied for a deterministic step")
    return coeffs.kappa * x + coeffs.omega * s


class BranchTree:
    """Recorded branching rollout over a flat node arena.

    states (M, 2), step (M,), parent (M,), eps (M, 2) with has_eps marking
    stochastic edges.  Leaves all sit at the lookahead step; x_hat holds
    their posterior-mean projection to t=0 and rewards the reward values
    when a reward function was supplied.
    """

    def __init__(self, plan: RolloutPlan, field_: ScoreField, start_index: int, seed: int):
        self.plan = plan
        self.field = field_
        self.start_index = int(start_index)
        self.seed = int(seed)
        self.states: np.ndarray | None = None
        self.step: np.ndarray | None = None
        self.parent: np.ndarray | None = None
        self.eps: np.ndarray | None = None
        self.has_eps: np.ndarray | None = None
        self.leaf_start: int = 0
        self.x_hat: np.ndarray | None = None
        self.rewards: Optional[np.ndarray] = None
        # per-level bookkeeping: node id ranges are contiguous per level and
        # children of a node are contiguous within the next level
        self.level_start: np.ndarray | None = None
        self.level_width: np.ndarray | None = None

    def _level_of(self, node_id: int) -> int:
        return int(np.searchsorted(self.level_start, node_id, side="right") - 1)

    def _block_size(self, level: int, m: int) -> int:
        return int(np.prod(self.level_width[level + 1 : m + 1])) if m > level else 1

    @property
    def n_nodes(self) -> int:
        return self.states.shape[0]

    def leaves(self) -> np.ndarray:
        return np.arange(self.leaf_start, self.n_nodes)

    def nodes_at_step(self, i: int) -> np.ndarray:
        return np.nonzero(self.step == i)[0]

    def ancestor_at_step(self, node_ids: np.ndarray, i: int) -> np.ndarray:
        """For each node, the ancestor (or itself) sitting at step i."""
        cur = np.asarray(node_ids).copy()
        for _ in range(self.plan.grid.n_steps + 2):
            behind = self.step[cur] < i
            if not np.any(behind):
                return cur
            cur[behind] = self.parent[cur[behind]]
        raise ContractError(f"no ancestor at step {i}")

    def branch_groups(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Group leaves by their ancestor edge at step i.

        Returns (node ids of the step-(i-1) children, the eps recorded on
        those edges, mean leaf reward below each edge).  Requires rewards
        and recorded noise at step i.
        """
        if self.rewards is None:
            raise ContractError("tree was built without a reward")
        leaves = self.leaves()
        anc = self.ancestor_at_step(leaves, i - 1)
        if not np.all(self.has_eps[anc]):
            raise ContractError(f"step {i} has no recorded noise")
        edges, inverse = np.unique(anc, return_inverse=True)
        sums = np.zeros(edges.size)
        counts = np.zeros(edges.size)
        np.add.at(sums, inverse, self.rewards)
        np.add.at(counts, inverse, 1.0)
        return edges, self.eps[edges], sums / counts

    def resimulate(self, node_id: int, y: np.ndarray) -> np.ndarray:
        """Re-run the frozen-noise subtree below `node_id` from new states y.

        y has shape (B, 2); returns the posterior-mean projections of the
        re-simulated leaves, shape (B, L, 2) where L is the number of leaves
        below node_id.  Reuses the stored eps record, so y = states[node_id]
        reproduces the recorded leaves bit-exactly.
        """
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        level = self._level_of(node_id)
        q = node_id - int(self.level_start[level])
        states = y[:, None, :]  # (B, n_current, 2)
        n_levels = self.level_start.size
        for m in range(level + 1, n_levels):
            i = self.start_index - m + 1  # step consumed entering level m
            k = self.plan.kernels[i]
            s = self.field(states, i)
            mean = np.repeat(k.kappa * states + k.omega * s, int(self.level_width[m]), axis=1)
            if k.sigma > 0.0:
                bs = self._block_size(level, m)
                st = int(self.level_start[m]) + q * bs
                mean = mean + k.sigma * self.eps[st : st + bs]
            states = mean
        return self._project_leaves(states, self.plan.lookahead)

    def resimulate_level(self, level: int, y: np.ndarray) -> np.ndarray:
        """Re-run the frozen-noise tree below a whole level from new states.

        y has shape (B, n_level, 2) holding B variants of every node state at
        that level (in node order); returns leaf projections (B, L, 2).
        Subtrees are independent, so this equals per-node `resimulate` but
        runs level-wise in a handful of array ops.
        """
        states = np.asarray(y, dtype=np.float64)
        n_levels = self.level_start.size
        for m in range(level + 1, n_levels):
            i = self.start_index - m + 1
            k = self.plan.kernels[i]
            s = self.field(states, i)
            mean = np.repeat(k.kappa * states + k.omega * s, int(self.level_width[m]), axis=1)
            if k.sigma > 0.0:
                st = int(self.level_start[m])
                end = int(self.level_start[m + 1]) if m + 1 < n_levels else self.n_nodes
                mean = mean + k.sigma * self.eps[st:end]
            states = mean
        return self._project_leaves(states, self.plan.lookahead)

    def rebuild_below(self, node_ids: np.ndarray) -> None:
        """Recompute descendant states after the given nodes were replaced."""
        current = np.asarray(node_ids)
        while current.size and int(self.step[current[0]]) > self.plan.lookahead:
            i = int(self.step[current[0]])
            k = self.plan.kernels[i]
            s = self.field(self.states[current], i)
            mean = k.kappa * self.states[current] + k.omega * s
            child_ids = np.nonzero(np.isin(self.parent, current))[0]
            idx = np.searchsorted(current, self.parent[child_ids])
            new_states = mean[idx]
            if k.sigma > 0.0:
                new_states = new_states + k.sigma * self.eps[child_ids]
            self.states[child_ids] = new_states
            current = child_ids
        self.x_hat = self._project_leaves(self.states[self.leaf_start :], self.plan.lookahead)

    def _project_leaves(self, states: np.ndarray, j: int) -> np.ndarray:
        if j == 0:
            return states
        a, b = self.plan.ab_at(j)
        s = self.field(states, j)
        return tweedie(states, s, a, b)

    def to_json(self) -> str:
        """Debug dump: node list with states and noises."""
        payload = {
            "start_index": self.start_index,
            "lookahead": self.plan.lookahead,
            "seed": self.seed,
            "nodes": [
                {
                    "state": self.states[n].tolist(),
                    "step": int(self.step[n]),
                    "parent": int(self.parent[n]),
                    "eps": self.eps[n].tolist() if self.has_eps[n] else None,
                }
                for n in range(self.n_nodes)
            ],
            "rewards": None if self.rewards is None else self.rewards.tolist(),
        }
        return json.dumps(payload, indent=2)


def _step_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed) & (2**63 - 1), i)))


def rollout(
    x_start: np.ndarray,
    start_index: int,
    plan: RolloutPlan,
    field_: ScoreField,
    rng_seed: int,
    reward: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> BranchTree:
    """Roll out from x_start at step `start_index` down to the lookahead step.

    Deterministic given (plan, seed): per-step noise comes from a stream
    keyed by (seed, step), and every epsilon is stored in the tree.
    """
    n = plan.grid.n_steps
    if not (plan.lookahead <= start_index <= n):
        raise DomainError(f"start_index {start_index} outside {plan.lookahead}..{n}")
    x_start = np.asarray(x_start, dtype=np.float64).reshape(2)

    tree = BranchTree(plan, field_, start_index, rng_seed)
    states = [x_start[None, :]]
    steps = [np.array([start_index])]
    parents = [np.array([-1])]
    eps_list = [np.zeros((1, 2))]
    has_eps = [np.array([False])]

    level = states[0]
    level_ids = np.array([0])
    next_id = 1
    level_start = [0]
    level_width = [1]
    for i in range(start_index, plan.lookahead, -1):
        k = plan.kernels[i]
        if k is None:
            raise ContractError(f"plan has no kernel for step {i}")
        s = field_(level, i)
        mean = k.kappa * level + k.omega * s
        m = level.shape[0]
        if k.sigma > 0.0:
            width = int(plan.branch_widths[i])
            eps = _step_rng(rng_seed, i).standard_normal((m, width, 2))
            children = (mean[:, None, :] + k.sigma * eps).reshape(m * width, 2)
            eps_flat = eps.reshape(m * width, 2)
            stoch = np.ones(m * width, dtype=bool)
        else:
            width = 1
            children = mean
            eps_flat = np.zeros((m, 2))
            stoch = np.zeros(m, dtype=bool)
        states.append(children)
        steps.append(np.full(children.shape[0], i - 1))
        parents.append(np.repeat(level_ids, width))
        eps_list.append(eps_flat)
        has_eps.append(stoch)
        level = children
        level_ids = np.arange(next_id, next_id + children.shape[0])
        level_start.append(next_id)
        level_width.append(width)
        next_id += children.shape[0]

    tree.level_start = np.asarray(level_start, dtype=np.int64)
    tree.level_width = np.asarray(level_width, dtype=np.int64)
    tree.states = np.concatenate(states, axis=0)
    tree.step = np.concatenate(steps, axis=0).astype(np.int64)
    tree.parent = np.concatenate(parents, axis=0).astype(np.int64)
    tree.eps = np.concatenate(eps_list, axis=0)
    tree.has_eps = np.concatenate(has_eps, axis=0)
    tree.leaf_start = tree.n_nodes - level.shape[0]
    tree.x_hat = tree._project_leaves(level, plan.lookahead)
    if reward is not None:
        tree.rewards = np.asarray(reward(tree.x_hat), dtype=np.float64)
    return tree


def revisit_branch(
    ode_path: Sequence[np.ndarray],
    path_steps: Sequence[int],
    i: int,
    k: int,
    plan: RolloutPlan,
    field_: ScoreField,
    rng_seed: int,
    reward: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    forced_eps: Optional[np.ndarray] = None,
) -> BranchTree:
    """Revisit an intermediate latent of a deterministic path: inject one
    step of SDE noise at step i to spawn k descendants, then continue each
    deterministically down to the plan's lookahead step.

    ode_path holds states along a sigma=0 path and path_steps their step
    indices.  forced_eps (shape (k, 2)) overrides the injected noises; zero
    noise yields the deterministic continuation of the revisit kernel's
    mean.
    """
    path_steps = list(path_steps)
    if i not in path_steps:
        raise DomainError(f"step {i} not on the provided path")
    x_i = np.asarray(ode_path[path_steps.index(i)], dtype=np.float64)

    mask = np.zeros(plan.grid.n_steps + 1, dtype=bool)
    mask[i] = True
    widths = np.ones(plan.grid.n_steps + 1, dtype=np.int64)
    widths[i] = k
    local = RolloutPlan.build(
        flow=plan.flow,
        grid=plan.grid,
        noise=plan.noise,
        family=plan.family,
        stochastic_mask=mask,
        branch_widths=widths,
        lookahead=plan.lookahead,
        steps=range(1, i + 1),
    )
    tree = rollout(x_i, i, local, field_, rng_seed, reward=None)
    if forced_eps is not None:
        forced_eps = np.asarray(forced_eps, dtype=np.float64).reshape(k, 2)
        children = tree.nodes_at_step(i - 1)
        kern = local.kernels[i]
        mean = kern.kappa * x_i + kern.omega * field_(x_i, i)
        tree.eps[children] = forced_eps
        tree.states[children] = mean + kern.sigma * forced_eps
        tree.rebuild_below(children)
    if reward is not None:
        tree.rewards = np.asarray(reward(tree.x_hat), dtype=np.float64)
    return tree


def ode_path(
    x_start: np.ndarray,
    start_index: int,
    plan: RolloutPlan,
    field_: ScoreField,
) -> tuple[list[np.ndarray], list[int]]:
    """Deterministic path from x_start down to the plan's lookahead step,
    using the sigma=0 kernels of the plan's flow/grid/family."""
    det = RolloutPlan.build(
        flow=plan.flow,
        grid=plan.grid,
        noise=NoiseSpec(rule="ode"),
        family=plan.family,
        lookahead=plan.lookahead,
        steps=range(1, start_index + 1),
    )
    tree = rollout(x_start, start_index, det, field_, rng_seed=0)
    path = [tree.states[n] for n in range(tree.n_nodes)]
    steps = [int(tree.step[n]) for n in range(tree.n_nodes)]
    return path, steps
