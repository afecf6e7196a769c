"""Credit-assignment measures computed exactly from a trajectory table.

The per-pair credit of ``(s, a)`` at step ``h`` is the divergence of the
return law ``p(Z_h | s, a)`` from the state's marginal ``p(Z_h | s)``;
information sparsity averages it under the normalized occupancy measure.
Trajectory-level measures (reward entropies, leave-one-out and history
conditional MI, hindsight ratios, directed information) are evaluated on one
canonical joint table per trajectory table.
"""
from __future__ import annotations

import csv
import io
import json
import math
import weakref
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import info
from .engine import (
    TrajectoryTable,
    UnreachableError,
    enumerate_trajectories,
    occupancy,
    return_distribution,
    state_return_distribution,
    step_return_tables,
)
from .info import JointTable, merge_close_values
from .mdp import Mdp, PolicySet, TabularPolicy, check_policy

MEASURES = (
    "pairwise_kl",
    "info_sparsity",
    "stepwise_reward_entropy",
    "leave_one_out_cmi",
    "history_cmi",
    "hca_ratio",
    "directed_info_credit",
    "return_sequence_mi",
)

DEFAULT_TOL = 1e-9


# -- reports ------------------------------------------------------------------


@dataclass
class CreditReport:
    """Values of one measure keyed by ``()`` (scalar), ``(h,)`` or ``(h, s, a)``.

    Values are stored in nats; ``flags`` maps a key to markers such as
    ``"infinite"`` or ``"missing"`` (the latter with a NaN value).
    """

    measure: str
    grain: str
    values: dict
    metadata: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    units: str = "nats"

    def scalar(self) -> float:
        return self.values[()]

    def rows(self, bits: bool = False) -> list[dict]:
        out = []
        for key, v in self.values.items():
            h, s, a = (tuple(key) + (None, None, None))[:3]
            out.append(
                {
                    "measure": self.measure,
                    "h": h,
                    "s": s,
                    "a": a,
                    "value_nats": v,
                    "value_bits": info.to_bits(v),
                    "flags": "|".join(self.flags.get(key, ())),
                }
            )
        return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


def reports_to_csv(reports: Sequence[CreditReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["measure", "h", "s", "a", "value_nats", "value_bits", "flags"])
    for r in reports:
        for row in r.rows():
            w.writerow([_fmt(row[k]) for k in ("measure", "h", "s", "a", "value_nats", "value_bits", "flags")])
    return buf.getvalue()


def _json_number(v: float):
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def reports_to_json(reports: Sequence[CreditReport], bits: bool = False) -> str:
    doc: dict = {"metadata": {}, "measures": {}}
    for r in reports:
        doc["metadata"].update(r.metadata)
        entries = []
        for row in r.rows():
            entries.append(
                {
                    "h": row["h"],
                    "s": row["s"],
                    "a": row["a"],
                    "value": _json_number(row["value_bits"] if bits else row["value_nats"]),
                    "flags": list(r.flags.get(tuple(k for k in (row["h"], row["s"], row["a"]) if k is not None), ())),
                }
            )
        doc["measures"][r.measure] = {"grain": r.grain, "units": "bits" if bits else r.units, "values": entries}
    return json.dumps(doc, indent=2, sort_keys=True)


def _metadata(t: TrajectoryTable, path: str = "exact-enumeration") -> dict:
    return {
        "mdp_hash": t.mdp.fingerprint(),
        "policy_hash": t.policy.fingerprint(),
        "merge_tolerance": t.merge_tolerance,
        "computation_path": path,
        "n_trajectories": t.n_rows,
    }


# -- canonical joint table ----------------------------------------------------

_JOINTS: "weakref.WeakKeyDictionary[TrajectoryTable, JointTable]" = weakref.WeakKeyDictionary()


def trajectory_joint(t: TrajectoryTable) -> JointTable:
    """Joint law of ``s{h}, a{h}, tau{h}, r{h}, z{h}`` (``h = 1..H``) with rewards
    and returns coded by merged atoms; cached per table."""
    hit = _JOINTS.get(t)
    if hit is not None:
        return hit
    H, A = t.horizon, t.mdp.num_actions
    _, rcode = merge_close_values(t.rewards.ravel(), tol=t.merge_tolerance)
    rcode = rcode.reshape(t.rewards.shape)
    names, cols = [], []
    for h in range(H):
        names += [f"s{h + 1}", f"a{h + 1}", f"tau{h + 1}", f"r{h + 1}", f"z{h + 1}"]
        cols += [
            t.states[:, h],
            t.actions[:, h],
            t.states[:, h].astype(np.int64) * A + t.actions[:, h],
            rcode[:, h],
            t.atom_index[:, h],
        ]
    j = JointTable(names, np.column_stack(cols), t.prob, normalize=True)
    _JOINTS[t] = j
    return j


def _taus(lo: int, hi: int) -> list[str]:
    return [f"tau{k}" for k in range(lo, hi + 1)]


def _check_h(t: TrajectoryTable, h: int) -> None:
    if not 1 <= h <= t.horizon:
        raise ValueError(f"timestep {h} outside 1..{t.horizon}")


# -- return-distribution credit -----------------------------------------------


def pairwise_credit(t: TrajectoryTable, h: int, s: int, a: int) -> float:
    """KL(p(Z_h | s, a) || p(Z_h | s)); ``math.inf`` if a zero-probability action
    reaches returns the state never produces."""
    _check_h(t, h)
    p_sa = return_distribution(t, h, s, a)
    p_s = state_return_distribution(t, h, s)
    return info.kl(p_sa, p_s, t.merge_tolerance)


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return terms.sum(axis=-1)


def pairwise_table(t: TrajectoryTable) -> np.ndarray:
    """``out[h-1, s, a]`` for every pair with positive occupancy; NaN elsewhere."""
    m = t.mdp
    out = np.full((m.horizon, m.num_states, m.num_actions), np.nan)
    for h in range(1, m.horizon + 1):
        joint, _ = step_return_tables(t, h)
        p_sa = joint.sum(axis=-1)
        p_s = p_sa.sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = joint / p_sa[..., None]
            marg = joint.sum(axis=1) / p_s[:, None]
        kl = _kl_rows(cond, marg[:, None, :])
        out[h - 1] = np.where(p_sa > 0, np.maximum(kl, 0.0), np.nan)
    return out


def _pooled_sparsity(t: TrajectoryTable) -> float:
    m = t.mdp
    S, A, K = m.num_states, m.num_actions, t.atom_values.size
    pooled = np.zeros(S * A * K)
    for h in range(m.horizon):
        key = (t.states[:, h].astype(np.int64) * A + t.actions[:, h]) * K + t.atom_index[:, h]
        pooled += (m.discount**h) * np.bincount(key, weights=t.prob, minlength=S * A * K)
    pooled = pooled.reshape(S, A, K)
    pooled /= pooled.sum()
    d_sa = pooled.sum(axis=-1)
    d_s = d_sa.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = pooled / d_sa[..., None]
        marg = pooled.sum(axis=1) / d_s[:, None]
    kl = np.where(d_sa > 0, _kl_rows(cond, marg[:, None, :]), 0.0)
    return info._clamp(float(np.sum(d_sa * kl)), "information sparsity")


def information_sparsity(t: TrajectoryTable, *, marginalize_time: bool = False) -> float:
    """Occupancy-weighted mean of the per-pair credit, i.e. I(A; Z | S).

    With ``marginalize_time`` the return laws are first pooled over timesteps
    by occupancy weight.
    """
    if marginalize_time:
        return _pooled_sparsity(t)
    occ = occupancy(t).normalized
    kl = pairwise_table(t)
    w = np.where(occ > 0, occ, 0.0)
    return info._clamp(float(np.sum(np.where(w > 0, w * np.nan_to_num(kl), 0.0))), "information sparsity")


def epsilon_sparsity_classify(
    m: Mdp,
    policies: PolicySet | Sequence[TabularPolicy] | None = None,
    epsilon: float = 0.0,
    *,
    budget: int | None = None,
    marginalize_time: bool = False,
) -> tuple[bool, float, int]:
    """``(is_sparse, sup, argmax)`` of information sparsity over a finite policy set
    (default: the uniform policy alone)."""
    members = ["uniform"] if policies is None else list(policies)
    if not members:
        raise ValueError("policy set must be nonempty")
    values = [
        information_sparsity(enumerate_trajectories(m, p, budget), marginalize_time=marginalize_time)
        for p in members
    ]
    best = int(np.argmax(values))
    return values[best] <= epsilon, values[best], best


# -- trajectory-level measures ------------------------------------------------


def stepwise_reward_entropy(t: TrajectoryTable, h: int) -> float:
    """H(R_h | tau^{h-1})."""
    _check_h(t, h)
    return info.conditional_entropy(trajectory_joint(t), f"r{h}", _taus(1, h - 1))


def leave_one_out_cmi(t: TrajectoryTable, h: int) -> float:
    """I(Z_1; tau_h | tau^{-h})."""
    _check_h(t, h)
    rest = [n for n in _taus(1, t.horizon) if n != f"tau{h}"]
    return info.conditional_mi(trajectory_joint(t), "z1", f"tau{h}", rest)


def history_cmi(t: TrajectoryTable, h: int) -> float:
    """I(Z_1; tau_h | tau^{h-1})."""
    _check_h(t, h)
    return info.conditional_mi(trajectory_joint(t), "z1", f"tau{h}", _taus(1, h - 1))


@dataclass(frozen=True, eq=False)
class HindsightTable:
    """``probs[h-1, s, k]`` is ``P(a_h = . | s_h = s, Z_1 = atom_values[k])``,
    NaN where the conditioning event has zero probability."""

    atom_values: np.ndarray
    probs: np.ndarray

    def __call__(self, h: int, s: int, z: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.atom_values - z)))
        row = self.probs[h - 1, s, k]
        if np.isnan(row).any():
            raise KeyError(f"no hindsight entry for (h={h}, s={s}, z={z})")
        return row

    @property
    def entries(self) -> dict:
        out = {}
        H, S, K, _ = self.probs.shape
        for h in range(H):
            for s in range(S):
                for k in range(K):
                    row = self.probs[h, s, k]
                    if not np.isnan(row).any():
                        out[(h + 1, s, float(self.atom_values[k]))] = row
        return out


def hindsight_table(t: TrajectoryTable) -> HindsightTable:
    m = t.mdp
    H, S, A, K = m.horizon, m.num_states, m.num_actions, t.atom_values.size
    probs = np.empty((H, S, K, A))
    z1 = t.atom_index[:, 0]
    for h in range(H):
        key = (t.states[:, h].astype(np.int64) * K + z1) * A + t.actions[:, h]
        joint = np.bincount(key, weights=t.prob, minlength=S * K * A).reshape(S, K, A)
        tot = joint.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            probs[h] = np.where(tot > 0, joint / tot, np.nan)
    return HindsightTable(t.atom_values, probs)


def hca_credit(t: TrajectoryTable, ht: HindsightTable, h: int) -> float:
    """E_{tau^h} E_{Z | tau^h}[log h_h(a_h | s_h, Z) / pi_h(a_h | s_h)]."""
    _check_h(t, h)
    s, a = t.states[:, h - 1], t.actions[:, h - 1]
    hind = ht.probs[h - 1, s, t.atom_index[:, 0], a]
    pi = t.policy.probs[h - 1, s, a]
    return float(np.sum(t.prob * np.log(hind / pi)))


def return_sequence_mi(t: TrajectoryTable) -> float:
    """I(tau_1..tau_H; Z_1..Z_H)."""
    H = t.horizon
    return info.mutual_information(trajectory_joint(t), _taus(1, H), [f"z{h}" for h in range(1, H + 1)])


@dataclass(frozen=True)
class DirectedCredit:
    directed: float
    entropy_sum: float
    time_ordered: float


def directed_info_credit(t: TrajectoryTable) -> DirectedCredit:
    """Hindsight-ordered directed information and its reward-entropy form.

    ``directed = sum_h I(Z_h; tau^h | Z_{h+1}^H)`` and ``entropy_sum = sum_h
    H(R_h | Z_{h+1}^H)``.  ``time_ordered`` applies the generic
    ``sum_t I(X^t; Y_t | Y^{t-1})`` to ``X = tau`` in time order and
    ``Y = (Z_H, ..., Z_1)``; it is reported, not asserted.
    """
    j = trajectory_joint(t)
    H = t.horizon
    directed = entropy_sum = 0.0
    for h in range(1, H + 1):
        future = [f"z{k}" for k in range(h + 1, H + 1)]
        directed += info.conditional_mi(j, f"z{h}", _taus(1, h), future)
        entropy_sum += info.conditional_entropy(j, f"r{h}", future)
    time_ordered = info.directed_information(j, _taus(1, H), [f"z{h}" for h in range(H, 0, -1)])
    return DirectedCredit(directed, entropy_sum, time_ordered)


def return_entropy(t: TrajectoryTable, h: int = 1) -> float:
    return info.conditional_entropy(trajectory_joint(t), f"z{h}")


# -- report assembly ----------------------------------------------------------


def credit_reports(
    t: TrajectoryTable, measures: Sequence[str] = MEASURES, *, marginalize_time: bool = False
) -> list[CreditReport]:
    meta = _metadata(t)
    meta["marginalize_time"] = marginalize_time
    H = t.horizon
    out = []
    for name in measures:
        if name not in MEASURES:
            raise ValueError(f"unknown measure {name!r}; choose from {', '.join(MEASURES)}")
        flags: dict = {}
        extra: list[CreditReport] = []
        if name == "info_sparsity":
            values = {(): information_sparsity(t, marginalize_time=marginalize_time)}
            grain = "scalar"
        elif name == "pairwise_kl":
            values, flags = _pairwise_values(t)
            grain = "h,s,a"
        elif name == "directed_info_credit":
            d = directed_info_credit(t)
            values = {(): d.directed}
            grain = "scalar"
            extra = [
                CreditReport("directed_info_entropy_sum", "scalar", {(): d.entropy_sum}, dict(meta)),
                CreditReport("directed_info_time_ordered", "scalar", {(): d.time_ordered}, dict(meta)),
            ]
        elif name == "return_sequence_mi":
            values = {(): return_sequence_mi(t)}
            grain = "scalar"
        elif name == "hca_ratio":
            ht = hindsight_table(t)
            values = {(h,): hca_credit(t, ht, h) for h in range(1, H + 1)}
            grain = "h"
        else:
            fn = {
                "stepwise_reward_entropy": stepwise_reward_entropy,
                "leave_one_out_cmi": leave_one_out_cmi,
                "history_cmi": history_cmi,
            }[name]
            values = {(h,): fn(t, h) for h in range(1, H + 1)}
            grain = "h"
        out.append(CreditReport(name, grain, values, dict(meta), flags))
        out.extend(extra)
    return out


def _pairwise_values(t: TrajectoryTable) -> tuple[dict, dict]:
    table = pairwise_table(t)
    values: dict = {}
    flags: dict = {}
    H, S, A = table.shape
    for h in range(H):
        for s in range(S):
            if not t.step_mask(h + 1, s).any():
                continue
            for a in range(A):
                key = (h + 1, s, a)
                if not np.isnan(table[h, s, a]):
                    values[key] = float(table[h, s, a])
                else:
                    # zero-probability action at a reachable state
                    v = pairwise_credit(t, h + 1, s, a)
                    values[key] = v
                    flags[key] = ["zero_policy_mass"] + (["infinite"] if math.isinf(v) else [])
    return values, flags


# -- proposition checker ------------------------------------------------------


@dataclass
class PropositionVerdict:
    """Both sides of one identity.  ``binding`` verdicts are those whose
    assumptions hold on the instance; only they can be ``discrepant``."""

    proposition: str
    lhs: float
    rhs: float
    abs_diff: float
    tolerance: float
    assumption_flags: list[str]
    verdict: str
    binding: bool

    def as_dict(self) -> dict:
        return {
            "proposition": self.proposition,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "abs_diff": self.abs_diff,
            "tolerance": self.tolerance,
            "assumption_flags": list(self.assumption_flags),
            "verdict": self.verdict,
            "binding": self.binding,
        }


def _verdict(name, lhs, rhs, tol, flags=(), binding=True) -> PropositionVerdict:
    diff = abs(lhs - rhs)
    if diff <= tol:
        v = "equal-within-tol"
    else:
        v = "discrepant" if binding else "not-applicable"
    return PropositionVerdict(name, float(lhs), float(rhs), float(diff), tol, list(flags), v, binding)


def occupancy_identity_gap(t: TrajectoryTable, rng: np.random.Generator, n_functions: int = 20) -> float:
    """Largest gap between the normalized-occupancy expectation of random
    ``f(s, a)`` and the trajectory-sum expectation divided by sum gamma^{h-1}."""
    m = t.mdp
    occ = occupancy(t)
    disc = m.discount ** np.arange(m.horizon)
    worst = 0.0
    for _ in range(n_functions):
        f = rng.normal(size=(m.num_states, m.num_actions))
        lhs = occ.expectation(f)
        per_traj = (f[t.states, t.actions] * disc[None, :]).sum(axis=1)
        rhs = float(np.dot(t.prob, per_traj)) / occ.normalizer
        worst = max(worst, abs(lhs - rhs))
    return worst


def check_propositions(
    m: Mdp,
    policy: TabularPolicy | str = "uniform",
    tol: float = DEFAULT_TOL,
    *,
    budget: int | None = None,
    seed: int = 0,
) -> list[PropositionVerdict]:
    """Evaluate both sides of every claimed identity on ``(m, policy)``."""
    policy = check_policy(policy, m)
    t = enumerate_trajectories(m, policy, budget)
    j = trajectory_joint(t)
    H = m.horizon
    out: list[PropositionVerdict] = []
    act_indep = m.action_independent_transitions()
    # a future that ignores (s_h, a_h) cannot reveal R_h; action independence alone
    # is not enough because s_{h+1} still depends on s_h
    memoryless = bool(np.all(m.transition == m.transition[:1, :1, :]))
    zero_gamma = m.discount == 0.0

    for h in range(1, H + 1):
        flags = []
        if h == H:
            flags.append("h_equals_H")
        if act_indep:
            flags.append("action_independent_transitions")
        if memoryless:
            flags.append("state_action_independent_transitions")
        degenerate = zero_gamma and h > 1
        if degenerate:
            flags.append("zero_discount")
        binding = (h == H or memoryless) and not degenerate
        out.append(_verdict(f"loo_cmi_vs_reward_entropy[h={h}]", leave_one_out_cmi(t, h), stepwise_reward_entropy(t, h), tol, flags, binding))

    ht = hindsight_table(t)
    init_info = info.mutual_information(j, "z1", "s1")
    hca = [hca_credit(t, ht, h) for h in range(1, H + 1)]
    hist = [history_cmi(t, h) for h in range(1, H + 1)]
    for h in range(1, H + 1):
        flags = []
        if H > 1:
            flags.append("factorization_assumed")
        if init_info > tol:
            flags.append("initial_state_informative")
        out.append(_verdict(f"hindsight_vs_history_cmi[h={h}]", hist[h - 1], hca[h - 1], tol, flags, binding=not flags))
    out.append(_verdict("history_cmi_chain_rule", math.fsum(hist), return_entropy(t), tol))
    flags = (["factorization_assumed"] if H > 1 else []) + (["initial_state_informative"] if init_info > tol else [])
    out.append(_verdict("hindsight_total_vs_return_info", math.fsum(hca), info.mutual_information(j, "z1", _taus(1, H)), tol, flags, not flags))

    rsmi = return_sequence_mi(t)
    d = directed_info_credit(t)
    out.append(_verdict("sequence_mi_vs_directed", rsmi, d.directed, tol))
    out.append(_verdict("directed_vs_reward_entropy_sum", d.directed, d.entropy_sum, tol))
    out.append(_verdict("sequence_mi_vs_time_ordered_directed", rsmi, d.time_ordered, tol, ["time_ordered_convention"], False))

    gap = occupancy_identity_gap(t, np.random.default_rng(seed))
    out.append(_verdict("occupancy_identity", gap, 0.0, tol))

    # Facts evaluated on the MDP-induced joint
    if H > 1:
        y, z = "tau1", f"tau{H}"
    else:
        y, z = "s1", "a1"
    fwd = info.mutual_information(j, "z1", y) + info.conditional_mi(j, "z1", z, y)
    bwd = info.mutual_information(j, "z1", z) + info.conditional_mi(j, "z1", y, z)
    out.append(_verdict("fact_mi_ordering", fwd, bwd, tol))
    for h in range(1, H):
        nxt = f"z{h + 1}"
        out.append(
            _verdict(
                f"fact_sum_entropy[h={h}]",
                info.conditional_entropy(j, f"z{h}", nxt),
                info.conditional_entropy(j, f"r{h}", nxt),
                tol,
            )
        )
        out.append(
            _verdict(
                f"fact_sum_mi[h={h}]",
                info.conditional_mi(j, f"z{h}", _taus(1, h), nxt),
                info.conditional_mi(j, f"r{h}", _taus(1, h), nxt),
                tol,
            )
        )
    return out


def verdicts_to_json(verdicts: Sequence[PropositionVerdict]) -> str:
    return json.dumps([v.as_dict() for v in verdicts], indent=2)


__all__ = [
    "CreditReport",
    "DirectedCredit",
    "HindsightTable",
    "MEASURES",
    "PropositionVerdict",
    "UnreachableError",
    "check_propositions",
    "credit_reports",
    "directed_info_credit",
    "epsilon_sparsity_classify",
    "hca_credit",
    "hindsight_table",
    "history_cmi",
    "information_sparsity",
    "leave_one_out_cmi",
    "pairwise_credit",
    "pairwise_table",
    "return_sequence_mi",
    "stepwise_reward_entropy",
    "trajectory_joint",
    "verdicts_to_json",
]
