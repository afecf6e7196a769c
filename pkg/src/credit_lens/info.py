"""Information-theoretic kernel over finite discrete distributions.

Every quantity is returned in nats as a plain ``float``; ``math.inf`` marks a
divergence whose first argument escapes the support of the second.  Floating
residue down to ``-NEG_TOL`` is clamped to zero, anything more negative raises
:class:`InformationError` because it points at a malformed table rather than
at rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NEG_TOL = 1e-12
MASS_TOL = 1e-9
MERGE_TOL = 1e-9
LN2 = math.log(2.0)

__all__ = [
    "DiscreteDist",
    "InformationError",
    "JointTable",
    "causal_entropy",
    "conditional_entropy",
    "conditional_mi",
    "directed_information",
    "entropy",
    "kl",
    "merge_close_values",
    "mutual_information",
    "to_bits",
]


class InformationError(ArithmeticError):
    """An information quantity came out negative beyond floating residue."""


def to_bits(nats: float) -> float:
    return nats / LN2


def _clamp(value: float, what: str) -> float:
    if value < 0.0:
        if value < -NEG_TOL:
            raise InformationError(f"{what} = {value!r} is negative beyond {NEG_TOL}")
        return 0.0
    return float(value)


def _plogp_sum(p: np.ndarray) -> float:
    p = p[p > 0]
    # np.sum reduces contiguous float arrays pairwise
    return float(-np.sum(p * np.log(p)))


def merge_close_values(values, weights=None, tol: float = MERGE_TOL):
    """Cluster sorted real values whose successive gaps are at most ``tol``.

    Returns ``(atoms, index)`` where ``atoms`` holds the weight-averaged value of
    each cluster (ascending) and ``index[i]`` is the cluster of ``values[i]``.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    w = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float).ravel()
    order = np.argsort(values, kind="stable")
    sv = values[order]
    starts = np.concatenate(([True], np.diff(sv) > tol))
    cluster_sorted = np.cumsum(starts) - 1
    n_clusters = int(cluster_sorted[-1]) + 1
    index = np.empty_like(cluster_sorted)
    index[order] = cluster_sorted
    wsum = np.bincount(index, weights=w, minlength=n_clusters)
    vsum = np.bincount(index, weights=w * values, minlength=n_clusters)
    atoms = np.where(wsum > 0, vsum / np.where(wsum > 0, wsum, 1.0), 0.0)
    # zero-weight clusters fall back to their first member
    if np.any(wsum <= 0):
        first = sv[starts]
        atoms = np.where(wsum > 0, atoms, first)
    return atoms, index


@dataclass(frozen=True, eq=False)
class DiscreteDist:
    """Finite probability mass function over an opaque, hashable support."""

    support: tuple
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size != len(self.support):
            raise ValueError("support and probs must have the same length")
        if np.any(probs < 0):
            raise ValueError("negative probability")
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "DiscreteDist":
        return cls(tuple(mapping), np.fromiter(mapping.values(), dtype=float, count=len(mapping)))

    def as_dict(self) -> dict:
        out: dict = {}
        for x, p in zip(self.support, self.probs):
            out[x] = out.get(x, 0.0) + float(p)
        return out


def _as_probs(p) -> np.ndarray:
    if isinstance(p, JointTable):
        return p.mass
    if hasattr(p, "probs"):
        return np.asarray(p.probs, dtype=float)
    return np.asarray(p, dtype=float).ravel()


def entropy(p) -> float:
    """Shannon entropy; accepts a distribution object, a probability vector or a
    :class:`JointTable` (joint entropy of all its variables)."""
    probs = _as_probs(p)
    if np.any(probs < 0):
        raise ValueError("negative probability")
    return _clamp(_plogp_sum(probs), "entropy")


def _real_support(d) -> bool:
    return hasattr(d, "values") and not isinstance(d, DiscreteDist)


def kl(p, q, merge_tol: float = MERGE_TOL) -> float:
    """KL(p || q), summed over the support of ``p``.

    Distributions over real values (anything exposing ``values`` and ``probs``,
    e.g. return distributions) are aligned atom-by-atom: a ``p`` atom matches a
    ``q`` atom within ``merge_tol``.  Returns ``math.inf`` when some ``p`` atom
    has no ``q`` mass.
    """
    if _real_support(p) and _real_support(q):
        pv, pp = np.asarray(p.values, float), np.asarray(p.probs, float)
        qv, qp = np.asarray(q.values, float), np.asarray(q.probs, float)
        keep = pp > 0
        pv, pp = pv[keep], pp[keep]
        order = np.argsort(qv)
        qv, qp = qv[order], qp[order]
        pos = np.searchsorted(qv, pv)
        left = np.clip(pos - 1, 0, max(qv.size - 1, 0))
        right = np.clip(pos, 0, max(qv.size - 1, 0))
        if qv.size == 0:
            return math.inf
        dl = np.abs(pv - qv[left])
        dr = np.abs(qv[right] - pv)
        match = np.where(dl <= dr, left, right)
        ok = np.minimum(dl, dr) <= merge_tol
        qm = np.where(ok, qp[match], 0.0)
    else:
        pd = p.as_dict() if isinstance(p, DiscreteDist) else dict(enumerate(_as_probs(p)))
        qd = q.as_dict() if isinstance(q, DiscreteDist) else dict(enumerate(_as_probs(q)))
        pp = np.array([v for v in pd.values() if v > 0])
        qm = np.array([qd.get(k, 0.0) for k, v in pd.items() if v > 0])
    if np.any(qm <= 0):
        return math.inf
    return _clamp(float(np.sum(pp * np.log(pp / qm))), "KL divergence")


def _names(v) -> list[str]:
    if isinstance(v, str):
        return [v]
    return list(v)


class JointTable:
    """Joint pmf over named finite variables.

    ``outcomes`` is an ``(N, V)`` array (or nested sequence) whose columns hold
    arbitrary hashable-by-value codes for each variable; duplicate outcome rows
    are aggregated and zero-mass rows dropped.  ``n_samples`` records the sample
    count behind an empirical table (used by the Miller-Madow correction).
    """

    def __init__(
        self,
        variables: Sequence[str],
        outcomes,
        mass,
        *,
        n_samples: int | None = None,
        normalize: bool = False,
    ):
        variables = list(variables)
        if len(set(variables)) != len(variables):
            raise ValueError("duplicate variable names")
        mass = np.asarray(mass, dtype=float).ravel()
        cols = np.asarray(outcomes)
        if cols.ndim == 1 and len(variables) == 1:
            cols = cols[:, None]
        if cols.ndim != 2 or cols.shape != (mass.size, len(variables)):
            raise ValueError(
                f"outcomes must have shape ({mass.size}, {len(variables)}), got {cols.shape}"
            )
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise ValueError("mass entries must be finite and nonnegative")
        total = float(mass.sum())
        if normalize:
            if total <= 0:
                raise ValueError("cannot normalize a table with zero mass")
            mass = mass / total
        elif abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"total mass {total!r} differs from 1 by more than {MASS_TOL}")
        codes = np.empty(cols.shape, dtype=np.int64)
        self._levels: dict[str, np.ndarray] = {}
        for i, name in enumerate(variables):
            levels, inv = np.unique(cols[:, i], return_inverse=True)
            codes[:, i] = inv.ravel()
            self._levels[name] = levels
        keep = mass > 0
        codes, mass = codes[keep], mass[keep]
        if codes.shape[0]:
            key = _row_keys(codes, [len(self._levels[v]) for v in variables])
            uniq, first, inv = np.unique(key, return_index=True, return_inverse=True)
            if uniq.size != key.size:
                codes = codes[first]
                mass = np.bincount(inv.ravel(), weights=mass, minlength=uniq.size)
        self.variables = tuple(variables)
        self.codes = codes
        self.mass = mass
        self.n_samples = n_samples
        self._col = {v: i for i, v in enumerate(variables)}
        self._cache: dict[frozenset, np.ndarray] = {}

    def __repr__(self):
        return f"JointTable(variables={self.variables!r}, outcomes={self.mass.size})"

    def __len__(self):
        return self.mass.size

    def levels(self, name: str) -> np.ndarray:
        """Distinct values of ``name``; ``codes`` columns index into this."""
        return self._levels[name]

    def _check(self, names: Iterable[str]) -> list[int]:
        cols = []
        for n in names:
            if n not in self._col:
                raise KeyError(f"unknown variable {n!r}; table has {self.variables}")
            cols.append(self._col[n])
        return cols

    def group(self, names) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(index, masses, first)``: the group of every row under the
        marginal on ``names``, the mass of each group and one representative
        row per group."""
        names = _names(names)
        cols = self._check(names)
        if not cols:
            n = self.mass.size
            return np.zeros(n, dtype=np.int64), np.array([self.mass.sum()]), np.zeros(min(n, 1), dtype=np.int64)
        key = _row_keys(self.codes[:, cols], [len(self._levels[self.variables[c]]) for c in cols])
        _, first, inv = np.unique(key, return_index=True, return_inverse=True)
        inv = inv.ravel()
        return inv, np.bincount(inv, weights=self.mass), first

    def group_masses(self, names) -> np.ndarray:
        names = frozenset(_names(names))
        self._check(names)
        hit = self._cache.get(names)
        if hit is None:
            hit = self.group(sorted(names))[1]
            self._cache[names] = hit
        return hit

    def marginal(self, names) -> "JointTable":
        names = _names(names)
        cols = self._check(names)
        _, masses, first = self.group(names)
        out = np.column_stack([self._levels[self.variables[c]][self.codes[first, c]] for c in cols]) if cols else np.zeros((masses.size, 0))
        return JointTable(names, out, masses, n_samples=self.n_samples, normalize=True)

    def conditional(self, target, given) -> dict:
        """``{given outcome: DiscreteDist over target}`` with outcomes decoded."""
        target, given = _names(target), _names(given)
        m = self.marginal(given + target)
        g = len(given)
        dec = [m.levels(v)[m.codes[:, i]] for i, v in enumerate(m.variables)]
        out: dict = {}
        for r in range(len(m)):
            gk = tuple(d[r].item() if hasattr(d[r], "item") else d[r] for d in dec[:g])
            tk = tuple(d[r].item() if hasattr(d[r], "item") else d[r] for d in dec[g:])
            out.setdefault(gk, {})
            out[gk][tk if len(tk) != 1 else tk[0]] = float(m.mass[r])
        result = {}
        for gk, dist in out.items():
            z = sum(dist.values())
            key = gk if len(gk) != 1 else gk[0]
            result[key] = DiscreteDist(tuple(dist), np.array(list(dist.values())) / z)
        return result


def _row_keys(codes: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    """Combine integer code columns into one int64 key per row."""
    key = np.zeros(codes.shape[0], dtype=np.int64)
    span = 1
    for j, card in enumerate(cards):
        card = max(int(card), 1)
        if span * card >= 2**62:
            _, key = np.unique(key, return_inverse=True)
            key = key.ravel().astype(np.int64)
            span = int(key.max()) + 1 if key.size else 1
        key = key * card + codes[:, j]
        span *= card
    return key


def _joint_entropy(j: JointTable, names, correction: str | None) -> float:
    masses = j.group_masses(names)
    h = _plogp_sum(masses)
    if correction == "miller-madow":
        if not j.n_samples:
            raise ValueError("Miller-Madow correction needs JointTable.n_samples")
        h += (np.count_nonzero(masses) - 1) / (2.0 * j.n_samples)
    elif correction is not None:
        raise ValueError(f"unknown correction {correction!r}")
    return h


def _finish(value: float, what: str, correction: str | None) -> float:
    return float(value) if correction else _clamp(value, what)


def conditional_entropy(j: JointTable, target, given=(), *, correction: str | None = None) -> float:
    """H(target | given) = H(target, given) - H(given)."""
    target, given = _names(target), _names(given)
    value = _joint_entropy(j, target + given, correction) - _joint_entropy(j, given, correction)
    return _finish(value, "conditional entropy", correction)


def _disjoint(*groups: list[str]):
    seen: set[str] = set()
    for g in groups:
        overlap = seen.intersection(g)
        if overlap:
            raise ValueError(f"variable sets overlap on {sorted(overlap)}")
        seen.update(g)


def conditional_mi(j: JointTable, xs, ys, zs=(), *, correction: str | None = None) -> float:
    """I(X; Y | Z) = H(X|Z) - H(X|Y,Z)."""
    xs, ys, zs = _names(xs), _names(ys), _names(zs)
    _disjoint(xs, ys, zs)
    value = (
        _joint_entropy(j, xs + zs, correction)
        - _joint_entropy(j, zs, correction)
        - _joint_entropy(j, xs + ys + zs, correction)
        + _joint_entropy(j, ys + zs, correction)
    )
    return _finish(value, "conditional mutual information", correction)


def mutual_information(j: JointTable, xs, ys, *, correction: str | None = None) -> float:
    return conditional_mi(j, xs, ys, (), correction=correction)


def _sequences(xs, ys) -> tuple[list[str], list[str]]:
    xs, ys = _names(xs), _names(ys)
    if len(xs) != len(ys):
        raise ValueError(f"sequence lengths differ: {len(xs)} vs {len(ys)}")
    _disjoint(xs, ys)
    return xs, ys


def causal_entropy(j: JointTable, ys, xs, *, lag: int = 1) -> float:
    """H(Y^T || X^T) = sum_t H(Y_t | Y^{t-1}, X^{t-lag}).

    ``lag=1`` conditions on the strictly earlier inputs; ``lag=0`` includes
    the same-step input.
    """
    xs, ys = _sequences(xs, ys)
    if lag not in (0, 1):
        raise ValueError("lag must be 0 or 1")
    total = 0.0
    for t in range(len(ys)):
        total += conditional_entropy(j, ys[t], ys[:t] + xs[: t + 1 - lag])
    return total


def directed_information(j: JointTable, xs, ys, *, lag: int = 0) -> float:
    """I(X^T -> Y^T) = sum_t I(X^{t-lag}; Y_t | Y^{t-1}).

    With matching ``lag`` this equals ``H(Y^T) - causal_entropy(j, ys, xs, lag=lag)``.
    """
    xs, ys = _sequences(xs, ys)
    if lag not in (0, 1):
        raise ValueError("lag must be 0 or 1")
    total = 0.0
    for t in range(len(ys)):
        past_x = xs[: t + 1 - lag]
        if past_x:
            total += conditional_mi(j, past_x, [ys[t]], ys[:t])
    return total

