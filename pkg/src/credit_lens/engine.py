"""Exact trajectory enumeration and the quantities derived from it.

Timesteps passed to public functions are 1-based (``1 <= h <= H``); arrays with
a time axis are 0-based, so ``V[h - 1]`` is the step-``h`` value.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from .info import MERGE_TOL, merge_close_values
from .mdp import Mdp, TabularPolicy, check_mdp, check_policy, discount_normalizer

DEFAULT_BUDGET = 10**7
DEFAULT_ATOMS = 201


class BudgetExceededError(RuntimeError):
    """Enumeration would materialize more trajectories than allowed."""

    def __init__(self, count: float, budget: int):
        self.count = count
        self.budget = budget
        super().__init__(
            f"{count:.0f} positive-probability trajectories exceed the budget of {budget};"
            " use categorical_return_dp or Monte Carlo estimation instead"
        )


class UnreachableError(ValueError):
    """A conditioning event has zero probability under the behaviour policy."""


def default_budget() -> int:
    env = os.environ.get("CREDIT_LENS_BUDGET")
    return int(float(env)) if env else DEFAULT_BUDGET


@dataclass(frozen=True, eq=False)
class ReturnDist:
    """Finite return distribution with atoms sorted by value."""

    values: np.ndarray
    probs: np.ndarray
    merge_tolerance: float = MERGE_TOL

    @classmethod
    def from_samples(cls, values, weights, merge_tolerance: float = MERGE_TOL) -> "ReturnDist":
        values = np.asarray(values, dtype=float).ravel()
        weights = np.asarray(weights, dtype=float).ravel()
        keep = weights > 0
        atoms, index = merge_close_values(values[keep], weights[keep], merge_tolerance)
        probs = np.bincount(index, weights=weights[keep], minlength=atoms.size)
        return cls(atoms, probs / probs.sum(), merge_tolerance)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return [(float(v), float(p)) for v, p in zip(self.values, self.probs)]

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def wasserstein(self, other: "ReturnDist") -> float:
        return float(wasserstein_distance(self.values, other.values, self.probs, other.probs))


def mixture(dists, weights, merge_tolerance: float = MERGE_TOL) -> ReturnDist:
    vals = np.concatenate([d.values for d in dists])
    w = np.concatenate([d.probs * wt for d, wt in zip(dists, weights)])
    return ReturnDist.from_samples(vals, w, merge_tolerance)


@dataclass(frozen=True, eq=False)
class TrajectoryTable:
    """Every positive-probability trajectory of ``(mdp, policy)``.

    Row ``i`` visits ``states[i, h]`` and takes ``actions[i, h]`` at 0-based step
    ``h``; ``returns[i, h] = rewards[i, h] + gamma * returns[i, h + 1]``.
    ``atom_index`` maps every return to the merged atom ``atom_values[k]``
    shared by the whole table, so conditionals at any step align exactly.
    """

    mdp: Mdp
    policy: TabularPolicy
    states: np.ndarray
    actions: np.ndarray
    prob: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    atom_values: np.ndarray
    atom_index: np.ndarray
    merge_tolerance: float = MERGE_TOL

    @property
    def n_rows(self) -> int:
        return int(self.prob.size)

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    def step_mask(self, h: int, s: int, a: int | None = None) -> np.ndarray:
        mask = self.states[:, h - 1] == s
        if a is not None:
            mask &= self.actions[:, h - 1] == a
        return mask

    def to_csv(self, dest=None) -> str | None:
        """Write ``prob, s1, a1, ..., sH, aH, r1..rH, z1..zH`` with 17 significant
        digits; returns the text when ``dest`` is None."""
        H = self.horizon
        header = ["prob"]
        for h in range(1, H + 1):
            header += [f"s{h}", f"a{h}"]
        header += [f"r{h}" for h in range(1, H + 1)] + [f"z{h}" for h in range(1, H + 1)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        g = "{:.17g}".format
        for i in range(self.n_rows):
            row = [g(self.prob[i])]
            for h in range(H):
                row += [str(self.states[i, h]), str(self.actions[i, h])]
            row += [g(x) for x in self.rewards[i]] + [g(x) for x in self.returns[i]]
            w.writerow(row)
        text = buf.getvalue()
        if dest is None:
            return text
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return None


@dataclass(frozen=True, eq=False)
class Occupancy:
    """``weights[h-1, s, a] = gamma^{h-1} P(s_h = s, a_h = a)``."""

    weights: np.ndarray
    normalizer: float

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.normalizer

    def expectation(self, f) -> float:
        """Normalized-occupancy expectation of ``f[s, a]``."""
        f = np.asarray(f, dtype=float)
        return float(np.sum(self.normalized * f[None, :, :]))


# -- enumeration --------------------------------------------------------------


def count_trajectories(m: Mdp, policy: TabularPolicy, start_step: int = 0, start=None) -> float:
    """Number of positive-probability trajectories, via a reachability product."""
    S = m.num_states
    support_t = (m.transition > 0).astype(float)
    c = (m.initial_dist > 0).astype(float) if start is None else np.asarray(start, dtype=float)
    total = 0.0
    for h in range(start_step, m.horizon):
        pos = (policy.probs[h] > 0).astype(float)
        per_sa = c[:, None] * pos
        if h == m.horizon - 1:
            total = float(per_sa.sum())
            break
        c = np.einsum("sa,sat->t", per_sa, support_t)
    return total if m.horizon > start_step else 0.0


def _csr(prob: np.ndarray):
    """Rows of ``prob`` (last axis) as CSR arrays of positive entries."""
    flat = prob.reshape(-1, prob.shape[-1])
    counts = (flat > 0).sum(axis=1)
    ptr = np.concatenate(([0], np.cumsum(counts)))
    rows, cols = np.nonzero(flat > 0)
    return counts, ptr, cols.astype(np.int32), flat[rows, cols]


def _fan_out(keys: np.ndarray, counts, ptr, cols, vals):
    """Expand each row with key ``k`` into ``counts[k]`` children."""
    c = counts[keys]
    parent = np.repeat(np.arange(keys.size), c)
    first = np.repeat(np.cumsum(c) - c, c)
    pos = ptr[keys][parent] + (np.arange(parent.size) - first)
    return parent, cols[pos], vals[pos]


def _expand(m: Mdp, policy: TabularPolicy, h0: int, init_states, init_prob, forced_action=None):
    S, A, H = m.num_states, m.num_actions, m.horizon
    succ = _csr(m.transition)
    states = [np.asarray(init_states, dtype=np.int32)]
    actions: list[np.ndarray] = []
    prob = np.asarray(init_prob, dtype=float)
    for h in range(h0, H):
        s = states[-1]
        if h == h0 and forced_action is not None:
            a = np.full(s.size, forced_action, dtype=np.int32)
        else:
            parent, a, pa = _fan_out(s, *_csr(policy.probs[h]))
            states = [col[parent] for col in states]
            actions = [col[parent] for col in actions]
            prob = prob[parent] * pa
        actions.append(a)
        if h < H - 1:
            parent, nxt, pt = _fan_out(states[-1].astype(np.int64) * A + a, *succ)
            states = [col[parent] for col in states] + [nxt]
            actions = [col[parent] for col in actions]
            prob = prob[parent] * pt
    return np.stack(states, axis=1), np.stack(actions, axis=1), prob


def _returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(rewards)
    out[:, -1] = rewards[:, -1]
    for h in range(rewards.shape[1] - 2, -1, -1):
        out[:, h] = rewards[:, h] + gamma * out[:, h + 1]
    return out


def enumerate_trajectories(
    m: Mdp,
    policy: TabularPolicy | str = "uniform",
    budget: int | None = None,
    merge_tol: float = MERGE_TOL,
) -> TrajectoryTable:
    """Exhaustive trajectory table in canonical (lexicographic) order.

    Raises :class:`BudgetExceededError` before allocating anything when the
    positive-probability trajectory count exceeds ``budget``.
    """
    check_mdp(m)
    policy = check_policy(policy, m)
    budget = default_budget() if budget is None else int(budget)
    count = count_trajectories(m, policy)
    if count > budget:
        raise BudgetExceededError(count, budget)
    init = np.flatnonzero(m.initial_dist > 0)
    states, actions, prob = _expand(m, policy, 0, init, m.initial_dist[init])
    rewards = m.reward[states, actions]
    returns = _returns(rewards, m.discount)
    w = np.repeat(prob, m.horizon)
    atoms, index = merge_close_values(returns.ravel(), w, merge_tol)
    for arr in (states, actions, prob, rewards, returns):
        arr.setflags(write=False)
    return TrajectoryTable(
        m, policy, states, actions, prob, rewards, returns,
        atoms, index.reshape(returns.shape).astype(np.int64), merge_tol,
    )


# -- return distributions -----------------------------------------------------


def _check_step(t_or_m, h: int) -> None:
    H = t_or_m.horizon
    if not 1 <= h <= H:
        raise ValueError(f"timestep {h} outside 1..{H}")


def forced_return_distribution(
    m: Mdp, policy: TabularPolicy, h: int, s: int, a: int, merge_tol: float = MERGE_TOL
) -> ReturnDist:
    """Law of ``Z_h`` given ``s_h = s`` when action ``a`` is forced at step ``h``
    and ``policy`` is followed afterwards (a policy-override rollout)."""
    _check_step(m, h)
    states, actions, prob = _expand(m, policy, h - 1, [s], [1.0], forced_action=a)
    rewards = m.reward[states, actions]
    z = _returns(rewards, m.discount)[:, 0]
    return ReturnDist.from_samples(z, prob, merge_tol)


def _atoms_dist(t: TrajectoryTable, mask: np.ndarray, h: int) -> ReturnDist:
    idx = t.atom_index[mask, h - 1]
    w = np.bincount(idx, weights=t.prob[mask], minlength=t.atom_values.size)
    nz = np.flatnonzero(w > 0)
    return ReturnDist(t.atom_values[nz], w[nz] / w[nz].sum(), t.merge_tolerance)


def return_distribution(
    t: TrajectoryTable, h: int, s: int, a: int, merge_tol: float | None = None
) -> ReturnDist:
    """Exact law of ``Z_h`` given ``(s_h, a_h) = (s, a)``.

    A reachable state paired with a zero-probability action is answered by a
    policy-override rollout; an unreachable state raises :class:`UnreachableError`.
    """
    _check_step(t, h)
    tol = t.merge_tolerance if merge_tol is None else merge_tol
    mask = t.step_mask(h, s, a)
    if mask.any():
        if tol == t.merge_tolerance:
            return _atoms_dist(t, mask, h)
        return ReturnDist.from_samples(t.returns[mask, h - 1], t.prob[mask], tol)
    if t.step_mask(h, s).any():
        return forced_return_distribution(t.mdp, t.policy, h, s, a, tol)
    raise UnreachableError(f"(h={h}, s={s}, a={a}) is unreachable: P(s_{h}={s}) = 0")


def state_return_distribution(
    t: TrajectoryTable, h: int, s: int, policy: TabularPolicy | None = None,
    merge_tol: float | None = None,
) -> ReturnDist:
    """``p(Z_h | s_h = s) = sum_a pi_h(a|s) p(Z_h | s, a)``."""
    _check_step(t, h)
    policy = t.policy if policy is None else policy
    if not t.step_mask(h, s).any():
        raise UnreachableError(f"(h={h}, s={s}) is unreachable")
    tol = t.merge_tolerance if merge_tol is None else merge_tol
    pi = policy.probs[h - 1, s]
    acts = np.flatnonzero(pi > 0)
    dists = [return_distribution(t, h, s, int(a), tol) for a in acts]
    return mixture(dists, pi[acts], tol)


def step_return_tables(t: TrajectoryTable, h: int):
    """Vectorized conditionals at step ``h``.

    Returns ``(joint, atom_values)`` where ``joint[s, a, k] = P(s_h=s, a_h=a,
    Z_h = atom k)`` over the atoms present at this step, in ascending order.
    """
    S, A = t.mdp.num_states, t.mdp.num_actions
    k_all = t.atom_index[:, h - 1]
    present = np.flatnonzero(np.bincount(k_all, minlength=t.atom_values.size))
    remap = np.zeros(t.atom_values.size, dtype=np.int64)
    remap[present] = np.arange(present.size)
    K = present.size
    key = (t.states[:, h - 1].astype(np.int64) * A + t.actions[:, h - 1]) * K + remap[k_all]
    joint = np.bincount(key, weights=t.prob, minlength=S * A * K).reshape(S, A, K)
    return joint, t.atom_values[present]


# -- occupancy and values -----------------------------------------------------


def occupancy(t: TrajectoryTable, gamma: float | None = None) -> Occupancy:
    m = t.mdp
    gamma = m.discount if gamma is None else float(gamma)
    S, A, H = m.num_states, m.num_actions, m.horizon
    w = np.zeros((H, S, A))
    for h in range(H):
        key = t.states[:, h].astype(np.int64) * A + t.actions[:, h]
        w[h] = (gamma**h) * np.bincount(key, weights=t.prob, minlength=S * A).reshape(S, A)
    norm = math.fsum(gamma**h for h in range(H))
    return Occupancy(w, norm)


def value_functions(m: Mdp, policy: TabularPolicy | str = "uniform"):
    """Finite-horizon backward induction; returns ``(V, Q)`` with shapes
    ``(H, S)`` and ``(H, S, A)``."""
    check_mdp(m)
    policy = check_policy(policy, m)
    H, S, A = m.horizon, m.num_states, m.num_actions
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q[h] = m.reward + m.discount * (m.transition @ V[h + 1])
        V[h] = np.sum(policy.probs[h] * Q[h], axis=1)
    return V[:H], Q


# -- categorical distributional DP --------------------------------------------


@dataclass(frozen=True, eq=False)
class CategoricalReturns:
    """``probs[h-1, s, a, k]`` is the mass on ``support[k]`` of ``Z_h | s, a``."""

    support: np.ndarray
    probs: np.ndarray

    @property
    def spacing(self) -> float:
        return float(self.support[1] - self.support[0])

    def dist(self, h: int, s: int, a: int) -> ReturnDist:
        p = self.probs[h - 1, s, a]
        nz = p > 0
        return ReturnDist(self.support[nz], p[nz], 0.0)

    def mean(self) -> np.ndarray:
        return self.probs @ self.support


def _project(values: np.ndarray, masses: np.ndarray, vmin: float, dz: float, K: int) -> np.ndarray:
    """Two-point linear projection of rows of weighted points onto the grid."""
    rows = values.shape[0]
    pos = np.clip((values - vmin) / dz, 0.0, K - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, K - 2)
    frac = pos - lo
    base = (np.arange(rows) * K)[:, None]
    out = np.bincount((base + lo).ravel(), weights=(masses * (1.0 - frac)).ravel(), minlength=rows * K)
    out += np.bincount((base + lo + 1).ravel(), weights=(masses * frac).ravel(), minlength=rows * K)
    return out.reshape(rows, K)


def return_grid(m: Mdp, num_atoms: int = DEFAULT_ATOMS) -> np.ndarray:
    scale = discount_normalizer(m)
    vmin = min(0.0, float(m.reward.min())) * scale
    vmax = max(0.0, float(m.reward.max())) * scale
    if vmax - vmin <= 0:
        vmin, vmax = vmin - 1.0, vmax + 1.0
    return np.linspace(vmin, vmax, num_atoms)


def categorical_return_dp(
    m: Mdp, policy: TabularPolicy | str = "uniform", num_atoms: int = DEFAULT_ATOMS
) -> CategoricalReturns:
    """Backward distributional recursion on a fixed grid.

    The grid spans ``[min(0, min R), max(0, max R)] * sum_h gamma^{h-1}``, which
    contains every ``Z_h``; pushed-forward atoms ``r + gamma z`` are split between
    their two neighbouring grid points so each projection preserves the mean.
    """
    if num_atoms < 2:
        raise ValueError("num_atoms must be at least 2")
    check_mdp(m)
    policy = check_policy(policy, m)
    H, S, A = m.horizon, m.num_states, m.num_actions
    z = return_grid(m, num_atoms)
    vmin, dz, K = float(z[0]), float(z[1] - z[0]), num_atoms
    probs = np.zeros((H, S, A, K))
    r = m.reward.reshape(S * A, 1)
    probs[H - 1] = _project(r, np.ones((S * A, 1)), vmin, dz, K).reshape(S, A, K)
    T = m.transition.reshape(S * A, S)
    for h in range(H - 2, -1, -1):
        succ_state = np.einsum("sa,sak->sk", policy.probs[h + 1], probs[h + 1])
        mass = T @ succ_state
        values = r + m.discount * z[None, :]
        probs[h] = _project(values, mass, vmin, dz, K).reshape(S, A, K)
    return CategoricalReturns(z, probs)
