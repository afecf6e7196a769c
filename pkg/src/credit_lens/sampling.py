"""Seeded Monte Carlo sampling and plug-in estimates of the credit measures.

Trajectory ``i`` of a batch draws its uniforms from a fixed block of a Philox
stream keyed by the seed, so any index range can be regenerated on its own
and batches merge without depending on how the work was split.  The plug-in
path builds its own empirical joint table and only shares the information
kernel with the exact path.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import info
from .credit import CreditReport
from .info import JointTable, MERGE_TOL, merge_close_values
from .mdp import Mdp, TabularPolicy, check_mdp, check_policy

PLUGIN_MEASURES = (
    "info_sparsity",
    "pairwise_kl",
    "stepwise_reward_entropy",
    "leave_one_out_cmi",
    "history_cmi",
    "hca_ratio",
    "directed_info_credit",
    "return_sequence_mi",
)


def _block_width(horizon: int) -> int:
    # one uniform for s_1, one per action, one per transition; Philox emits 4 per counter step
    return 4 * math.ceil(2 * horizon / 4)


def trajectory_uniforms(seed: int, start: int, stop: int, horizon: int) -> np.ndarray:
    """Uniforms for trajectories ``start..stop-1``; rows are identical however the
    index range is split."""
    width = _block_width(horizon)
    bitgen = np.random.Philox(key=int(seed) % 2**128, counter=start * width // 4)
    return np.random.Generator(bitgen).random((stop - start) * width).reshape(stop - start, width)


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (cdf_rows > u[:, None]).argmax(axis=1)


def _cdf(p: np.ndarray) -> np.ndarray:
    """Cumulative sums along the last axis, opened to +inf from the last
    positive entry so rounding never selects a zero-probability outcome."""
    c = np.cumsum(p, axis=-1)
    flat = p.reshape(-1, p.shape[-1])
    cf = c.reshape(-1, p.shape[-1])
    last = flat.shape[1] - 1 - np.argmax(flat[:, ::-1] > 0, axis=1)
    cols = np.arange(flat.shape[1])[None, :]
    cf = np.where(cols >= last[:, None], np.inf, cf)
    return cf.reshape(c.shape)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Sampled trajectories; ``weights`` is None for i.i.d. draws (each row has
    mass ``1/n``) or explicit row masses for a weighted table."""

    mdp: Mdp
    policy: TabularPolicy
    seed: int | None
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    def row_mass(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights / self.weights.sum()

    def to_bytes(self) -> bytes:
        parts = [self.states, self.actions, self.rewards, self.returns]
        if self.weights is not None:
            parts.append(self.weights)
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)

    @classmethod
    def from_table(cls, t) -> "SampleBatch":
        """Weighted batch carrying an exact trajectory table's probabilities."""
        return cls(t.mdp, t.policy, None, np.asarray(t.states), np.asarray(t.actions),
                   np.asarray(t.rewards), np.asarray(t.returns), np.asarray(t.prob, dtype=float))

    @classmethod
    def concatenate(cls, batches: Sequence["SampleBatch"]) -> "SampleBatch":
        b0 = batches[0]
        return cls(
            b0.mdp, b0.policy, b0.seed,
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.actions for b in batches]),
            np.concatenate([b.rewards for b in batches]),
            np.concatenate([b.returns for b in batches]),
        )


def sample_trajectories(
    m: Mdp, policy: TabularPolicy | str, n: int, seed: int, *, start: int = 0
) -> SampleBatch:
    """Draw trajectories ``start .. start+n-1`` of the stream keyed by ``seed``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    check_mdp(m)
    policy = check_policy(policy, m)
    H, S, A = m.horizon, m.num_states, m.num_actions
    u = trajectory_uniforms(seed, start, start + n, H)
    beta_cdf = _cdf(m.initial_dist[None, :])[0]
    pi_cdf = _cdf(policy.probs)
    t_cdf = _cdf(m.transition)
    states = np.empty((n, H), dtype=np.int32)
    actions = np.empty((n, H), dtype=np.int32)
    states[:, 0] = np.searchsorted(beta_cdf, u[:, 0], side="right")
    for h in range(H):
        s = states[:, h]
        actions[:, h] = _inverse_cdf(pi_cdf[h, s], u[:, 1 + 2 * h])
        if h < H - 1:
            states[:, h + 1] = _inverse_cdf(t_cdf[s, actions[:, h]], u[:, 2 + 2 * h])
    rewards = m.reward[states, actions]
    returns = np.empty_like(rewards)
    returns[:, -1] = rewards[:, -1]
    for h in range(H - 2, -1, -1):
        returns[:, h] = rewards[:, h] + m.discount * returns[:, h + 1]
    return SampleBatch(m, policy, seed, states, actions, rewards, returns)


# -- plug-in estimation -------------------------------------------------------


def empirical_joint(b: SampleBatch, merge_tol: float = MERGE_TOL) -> JointTable:
    H, A = b.mdp.horizon, b.mdp.num_actions
    _, zc = merge_close_values(b.returns.ravel(), np.repeat(b.row_mass(), H), merge_tol)
    _, rc = merge_close_values(b.rewards.ravel(), tol=merge_tol)
    zc, rc = zc.reshape(b.returns.shape), rc.reshape(b.rewards.shape)
    names, cols = [], []
    for h in range(H):
        k = str(h + 1)
        names += ["s" + k, "a" + k, "tau" + k, "r" + k, "z" + k]
        cols += [b.states[:, h], b.actions[:, h], b.states[:, h].astype(np.int64) * A + b.actions[:, h], rc[:, h], zc[:, h]]
    n = b.n if b.weights is None else None
    return JointTable(names, np.column_stack(cols), b.row_mass(), n_samples=n, normalize=True)


def _step_weights(m: Mdp) -> np.ndarray:
    g = m.discount ** np.arange(m.horizon)
    return g / g.sum()


def _plugin_pairwise(j: JointTable, h: int, merge_tol: float) -> dict:
    """``{(s, a): KL(p^(z|s,a) || p^(z|s))}`` over visited pairs at step ``h``."""
    out = {}
    by_sa = j.conditional(f"z{h}", [f"s{h}", f"a{h}"])
    by_s = j.conditional(f"z{h}", f"s{h}")
    for (s, a), dist in by_sa.items():
        out[(int(s), int(a))] = info.kl(dist, by_s[s])
    return out


def plugin_measures(
    b: SampleBatch,
    merge_tol: float = MERGE_TOL,
    measures: Sequence[str] = PLUGIN_MEASURES,
    *,
    miller_madow: bool = False,
    marginalize_time: bool = False,
) -> list[CreditReport]:
    """Plug-in estimates: empirical conditionals replace exact ones.

    Pairs never visited are reported as NaN with the ``missing`` flag.
    ``miller_madow`` adds ``(K - 1) / 2n`` to every plug-in entropy.
    """
    m = b.mdp
    H, S, A = m.horizon, m.num_states, m.num_actions
    j = empirical_joint(b, merge_tol)
    corr = "miller-madow" if miller_madow else None
    if corr and j.n_samples is None:
        raise ValueError("Miller-Madow correction needs an unweighted sample batch")
    meta = {
        "mdp_hash": m.fingerprint(),
        "policy_hash": b.policy.fingerprint(),
        "merge_tolerance": merge_tol,
        "computation_path": "plugin-monte-carlo",
        "n_samples": b.n,
        "seed": b.seed,
        "miller_madow": miller_madow,
    }
    taus = [f"tau{h}" for h in range(1, H + 1)]
    zs = [f"z{h}" for h in range(1, H + 1)]
    cmi = lambda x, y, z=(): info.conditional_mi(j, x, y, z, correction=corr)  # noqa: E731
    ent = lambda x, z=(): info.conditional_entropy(j, x, z, correction=corr)  # noqa: E731
    reports = []
    for name in measures:
        flags: dict = {}
        grain = "h"
        if name == "info_sparsity":
            grain = "scalar"
            if marginalize_time:
                values = {(): _pooled_plugin(b, merge_tol, corr)}
            else:
                w = _step_weights(m)
                values = {(): math.fsum(w[h - 1] * cmi(f"a{h}", f"z{h}", f"s{h}") for h in range(1, H + 1))}
        elif name == "pairwise_kl":
            grain = "h,s,a"
            values = {}
            for h in range(1, H + 1):
                seen = _plugin_pairwise(j, h, merge_tol)
                for s in range(S):
                    for a in range(A):
                        key = (h, s, a)
                        if (s, a) in seen:
                            values[key] = seen[(s, a)]
                        else:
                            values[key] = math.nan
                            flags[key] = ["missing"]
        elif name == "stepwise_reward_entropy":
            values = {(h,): ent(f"r{h}", taus[: h - 1]) for h in range(1, H + 1)}
        elif name == "leave_one_out_cmi":
            values = {(h,): cmi("z1", taus[h - 1], taus[: h - 1] + taus[h:]) for h in range(1, H + 1)}
        elif name == "history_cmi":
            values = {(h,): cmi("z1", taus[h - 1], taus[: h - 1]) for h in range(1, H + 1)}
        elif name == "hca_ratio":
            # E[log h^(a|s,Z) / pi^(a|s)] is the plug-in I(A_h; Z_1 | S_h)
            values = {(h,): cmi(f"a{h}", "z1", f"s{h}") for h in range(1, H + 1)}
        elif name == "directed_info_credit":
            grain = "scalar"
            values = {(): math.fsum(cmi(zs[h - 1], taus[:h], zs[h:]) for h in range(1, H + 1))}
            reports.append(CreditReport(name, grain, values, dict(meta)))
            name = "directed_info_entropy_sum"
            values = {(): math.fsum(ent(f"r{h}", zs[h:]) for h in range(1, H + 1))}
        elif name == "return_sequence_mi":
            grain = "scalar"
            values = {(): cmi(taus, zs)}
        else:
            raise ValueError(f"unknown measure {name!r}; choose from {', '.join(PLUGIN_MEASURES)}")
        reports.append(CreditReport(name, grain, values, dict(meta), flags))
    return reports


def _pooled_plugin(b: SampleBatch, merge_tol: float, corr) -> float:
    m = b.mdp
    H = m.horizon
    w = _step_weights(m)
    mass = np.concatenate([b.row_mass() * w[h] for h in range(H)])
    _, zc = merge_close_values(b.returns.ravel(), np.repeat(b.row_mass(), H), merge_tol)
    zc = zc.reshape(b.returns.shape)
    cols = np.column_stack([
        np.concatenate([b.states[:, h] for h in range(H)]),
        np.concatenate([b.actions[:, h] for h in range(H)]),
        np.concatenate([zc[:, h] for h in range(H)]),
    ])
    pooled = JointTable(["s", "a", "z"], cols, mass, n_samples=None, normalize=True)
    return info.conditional_mi(pooled, "a", "z", "s")


def scalar_summary(reports: Sequence[CreditReport], measure: str) -> float:
    """One number per measure: the scalar itself, or the sum over timesteps."""
    for r in reports:
        if r.measure == measure:
            return math.fsum(v for v in r.values.values() if not math.isnan(v))
    raise KeyError(measure)


# -- convergence --------------------------------------------------------------


@dataclass
class ConvergenceReport:
    measure: str
    exact_value: float
    estimates: list[tuple[int, int, float]] = field(default_factory=list)  # (n, seed, estimate)
    seeds: tuple[int, ...] = ()

    def abs_errors(self, n: int) -> list[float]:
        return [abs(est - self.exact_value) for k, _, est in self.estimates if k == n]

    def median_abs_error(self, n: int) -> float:
        return float(np.median(self.abs_errors(n)))

    @property
    def n_grid(self) -> list[int]:
        return sorted({k for k, _, _ in self.estimates})

    def monotone(self) -> bool:
        errs = [self.median_abs_error(n) for n in self.n_grid]
        return all(b <= a for a, b in zip(errs, errs[1:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["measure", "n", "seed_count", "median_abs_error", "exact_value"])
        for n in self.n_grid:
            w.writerow([self.measure, n, len(self.abs_errors(n)),
                        f"{self.median_abs_error(n):.17g}", f"{self.exact_value:.17g}"])
        return buf.getvalue()


def exact_scalar(m: Mdp, policy, measure: str, *, budget: int | None = None) -> float:
    from .credit import credit_reports
    from .engine import enumerate_trajectories

    t = enumerate_trajectories(m, policy, budget)
    return scalar_summary(credit_reports(t, [measure]), measure)


def convergence_sweep(
    m: Mdp,
    policy,
    measure: str,
    n_grid: Sequence[int],
    seeds: Sequence[int],
    *,
    merge_tol: float = MERGE_TOL,
    budget: int | None = None,
) -> ConvergenceReport:
    """Plug-in estimates of one measure over a grid of sample sizes and seeds,
    against the exact value."""
    if measure not in PLUGIN_MEASURES or measure == "pairwise_kl":
        raise ValueError(f"unknown measure {measure!r}; choose from "
                         + ", ".join(x for x in PLUGIN_MEASURES if x != "pairwise_kl"))
    policy = check_policy(policy, check_mdp(m))
    exact = exact_scalar(m, policy, measure, budget=budget)
    rep = ConvergenceReport(measure, exact, seeds=tuple(int(s) for s in seeds))
    for n in n_grid:
        for seed in seeds:
            b = sample_trajectories(m, policy, int(n), int(seed))
            est = scalar_summary(plugin_measures(b, merge_tol, [measure]), measure)
            rep.estimates.append((int(n), int(seed), est))
    return rep
