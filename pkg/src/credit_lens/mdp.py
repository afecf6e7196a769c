"""Finite-horizon tabular MDPs, behaviour policies, generators and reward shaping."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_TOL = 1e-12

# gridworld action order: up, right, down, left as (drow, dcol)
GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
CHAIN_LEFT, CHAIN_RIGHT = 0, 1


class InvalidMdpError(ValueError):
    """Raised when an MDP or policy violates its structural invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MdpSchemaError(ValueError):
    """A serialized MDP does not match the file schema; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite-horizon MDP with deterministic rewards ``reward[s, a]`` and
    transition kernel ``transition[s, a, s']``.

    Construction only coerces shapes and types; call :func:`validate_mdp` (or
    :func:`check_mdp`) to check the probabilistic invariants.
    """

    reward: np.ndarray
    transition: np.ndarray
    initial_dist: np.ndarray
    horizon: int
    discount: float = 1.0
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "discount", float(self.discount))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))

    @property
    def num_states(self) -> int:
        return int(self.transition.shape[0]) if self.transition.ndim else 0

    @property
    def num_actions(self) -> int:
        return int(self.transition.shape[1]) if self.transition.ndim > 1 else 0

    def __eq__(self, other):
        if not isinstance(other, Mdp):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and self.discount == other.discount
            and self.labels == other.labels
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in (
                    (self.reward, other.reward),
                    (self.transition, other.transition),
                    (self.initial_dist, other.initial_dist),
                )
            )
        )

    __hash__ = None  # type: ignore[assignment]

    def replace(self, **changes) -> "Mdp":
        fields = dict(
            reward=self.reward,
            transition=self.transition,
            initial_dist=self.initial_dist,
            horizon=self.horizon,
            discount=self.discount,
            labels=self.labels,
        )
        fields.update(changes)
        return Mdp(**fields)

    def fingerprint(self) -> str:
        """Short content hash used in report metadata."""
        h = hashlib.sha256()
        for a in (self.reward, self.transition, self.initial_dist):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
            h.update(repr(a.shape).encode())
        h.update(f"{self.horizon}|{self.discount!r}".encode())
        return h.hexdigest()[:16]

    def action_independent_transitions(self, tol: float = 0.0) -> bool:
        t = self.transition
        return bool(np.all(np.abs(t - t[:, :1, :]) <= tol))

    def action_independent_rewards(self, tol: float = 0.0) -> bool:
        r = self.reward
        return bool(np.all(np.abs(r - r[:, :1]) <= tol))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Non-stationary policy; ``probs[h, s, a]`` is the step-``h+1`` action
    distribution in state ``s``."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))

    @property
    def horizon(self) -> int:
        return int(self.probs.shape[0])

    def __eq__(self, other):
        if not isinstance(other, TabularPolicy):
            return NotImplemented
        return self.probs.shape == other.probs.shape and np.array_equal(self.probs, other.probs)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def stationary(cls, table, horizon: int) -> "TabularPolicy":
        table = np.asarray(table, dtype=float)
        return cls(np.broadcast_to(table, (horizon,) + table.shape))

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.probs, dtype="<f8").tobytes())
        h.update(repr(self.probs.shape).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class PolicySet:
    """Finite nonempty set of candidate initial policies."""

    members: tuple[TabularPolicy, ...]

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("policy set must be nonempty")
        shapes = {p.probs.shape for p in members}
        if len(shapes) != 1:
            raise ValueError(f"policies disagree on dimensions: {sorted(shapes)}")
        object.__setattr__(self, "members", members)

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)


# -- validation ---------------------------------------------------------------


def _check_distribution(vec: np.ndarray, name: str) -> list[str]:
    problems = []
    if not np.all(np.isfinite(vec)):
        problems.append(f"{name} has non-finite entries")
        return problems
    neg = np.flatnonzero(vec < 0)
    if neg.size:
        problems.append(f"{name} has negative entries at {neg.tolist()}")
    total = float(vec.sum())
    if abs(total - 1.0) > ROW_TOL:
        problems.append(f"{name} sums to {total!r}, not 1")
    return problems


def validate_mdp(m: Mdp) -> list[str]:
    """All invariant violations of ``m`` as human-readable strings (empty if valid)."""
    out: list[str] = []
    t, r, b = m.transition, m.reward, m.initial_dist
    if t.ndim != 3 or t.shape[0] != t.shape[2] or t.shape[0] < 1 or t.shape[1] < 1:
        return [f"transition must have shape (S, A, S), got {t.shape}"]
    S, A = t.shape[:2]
    if r.shape != (S, A):
        out.append(
            f"reward must be a deterministic (S, A) = ({S}, {A}) table, got shape {r.shape}"
        )
    elif not np.all(np.isfinite(r)):
        bad = np.argwhere(~np.isfinite(r)).tolist()
        out.append(f"reward has non-finite entries at {bad}")
    if b.shape != (S,):
        out.append(f"initial_dist must have shape ({S},), got {b.shape}")
    else:
        for s in np.flatnonzero(b < 0):
            out.append(f"initial_dist[{s}] = {b[s]!r} is negative")
        if np.all(np.isfinite(b)):
            total = float(b.sum())
            if abs(total - 1.0) > ROW_TOL:
                out.append(f"initial_dist sums to {total!r}, not 1")
        else:
            out.append("initial_dist has non-finite entries")
    for s in range(S):
        for a in range(A):
            for p in _check_distribution(t[s, a], f"transition[{s}][{a}]"):
                out.append(p)
    if m.horizon < 1:
        out.append(f"horizon must be a positive integer, got {m.horizon}")
    if not (0.0 <= m.discount <= 1.0):
        out.append(f"discount must lie in [0, 1], got {m.discount!r}")
    if m.labels is not None and len(m.labels) != S:
        out.append(f"labels must have {S} entries, got {len(m.labels)}")
    return out


def validate_policy(policy: TabularPolicy, m: Mdp) -> list[str]:
    out = []
    p = policy.probs
    if p.shape != (m.horizon, m.num_states, m.num_actions):
        return [
            f"policy must have shape (H, S, A) = ({m.horizon}, {m.num_states}, {m.num_actions}),"
            f" got {p.shape}"
        ]
    for h in range(p.shape[0]):
        for s in range(p.shape[1]):
            out.extend(_check_distribution(p[h, s], f"policy[{h}][{s}]"))
    return out


def check_mdp(m) -> Mdp:
    """Return ``m`` if it is a valid :class:`Mdp`, else raise :class:`InvalidMdpError`."""
    if not isinstance(m, Mdp):
        raise TypeError(f"expected an Mdp, got {type(m).__name__}")
    problems = validate_mdp(m)
    if problems:
        raise InvalidMdpError(problems)
    return m


def check_policy(policy, m: Mdp) -> TabularPolicy:
    """Resolve ``"uniform"`` or a raw array into a validated :class:`TabularPolicy`."""
    if isinstance(policy, str):
        if policy != "uniform":
            raise ValueError(f"unknown policy spec {policy!r}")
        return uniform_policy(m)
    if not isinstance(policy, TabularPolicy):
        policy = TabularPolicy(policy)
    problems = validate_policy(policy, m)
    if problems:
        raise InvalidMdpError(problems)
    return policy


# -- generators ---------------------------------------------------------------


def uniform_policy(m: Mdp) -> TabularPolicy:
    A = m.num_actions
    return TabularPolicy(np.full((m.horizon, m.num_states, A), 1.0 / A))


def make_chain(n: int, horizon: int, goal_reward: float = 1.0, discount: float = 1.0) -> Mdp:
    """Deterministic ``n``-state chain with actions left/right, clipped at both
    ends; only the move entering state ``n - 1`` is rewarded."""
    if n < 2:
        raise ValueError(f"chain needs at least 2 states, got {n}")
    T = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    for s in range(n):
        for a, step in ((CHAIN_LEFT, -1), (CHAIN_RIGHT, 1)):
            nxt = min(max(s + step, 0), n - 1)
            T[s, a, nxt] = 1.0
            if nxt == n - 1 and s != n - 1:
                R[s, a] = goal_reward
    beta = np.zeros(n)
    beta[0] = 1.0
    return Mdp(R, T, beta, horizon, discount)


def make_bandit(rewards: Sequence[float] = (0.0, 1.0), discount: float = 1.0) -> Mdp:
    """One-state, one-step bandit with one arm per reward."""
    A = len(rewards)
    return Mdp(np.array([rewards], dtype=float), np.ones((1, A, 1)), [1.0], 1, discount)


def grid_index(cell: tuple[int, int], width: int) -> int:
    return cell[0] * width + cell[1]


def make_gridworld(
    width: int,
    height: int,
    goal: tuple[int, int],
    horizon: int,
    discount: float = 1.0,
    slip: float = 0.0,
) -> Mdp:
    """Gridworld with cardinal moves (up, right, down, left) clipped at walls.

    ``goal`` is a ``(row, col)`` cell.  With probability ``slip`` the executed
    move is drawn uniformly from the four directions.  The reward of ``(s, a)``
    is the probability that the move enters the goal from another cell; the goal
    is not absorbing.  The start distribution is uniform over non-goal cells.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise ValueError("gridworld needs at least two cells")
    row, col = goal
    if not (0 <= row < height and 0 <= col < width):
        raise ValueError(f"goal {goal} lies outside the {height}x{width} grid")
    if not (0.0 <= slip <= 1.0):
        raise ValueError(f"slip must be a probability, got {slip}")
    S = width * height
    g = grid_index(goal, width)

    def move(s: int, d: int) -> int:
        r, c = divmod(s, width)
        dr, dc = GRID_MOVES[d]
        return min(max(r + dr, 0), height - 1) * width + min(max(c + dc, 0), width - 1)

    T = np.zeros((S, 4, S))
    for s in range(S):
        for a in range(4):
            T[s, a, move(s, a)] += 1.0 - slip
            for d in range(4):
                T[s, a, move(s, d)] += slip / 4.0
    R = T[:, :, g].copy()
    R[g, :] = 0.0
    beta = np.full(S, 1.0 / (S - 1))
    beta[g] = 0.0
    labels = tuple(f"{r}_{c}" for r in range(height) for c in range(width))
    return Mdp(R, T, beta, horizon, discount, labels)


def manhattan_metric(width: int, height: int) -> np.ndarray:
    rc = np.array([divmod(s, width) for s in range(width * height)])
    return np.abs(rc[:, None, :] - rc[None, :, :]).sum(axis=-1).astype(float)


def chain_metric(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]).astype(float)


def random_mdp(
    rng: np.random.Generator,
    num_states: int | None = None,
    num_actions: int | None = None,
    horizon: int | None = None,
    *,
    max_states: int = 4,
    max_actions: int = 3,
    max_horizon: int = 4,
    reward_levels: Sequence[float] = (0.0, 0.5, 1.0, 1.5),
    discounts: Sequence[float] = (0.5, 0.9, 1.0),
    sparsity: float = 0.4,
) -> Mdp:
    """Random MDP with rewards drawn from ``reward_levels`` and sparse
    Dirichlet transition rows (each row keeps at least one successor)."""
    S = num_states or int(rng.integers(1, max_states + 1))
    A = num_actions or int(rng.integers(1, max_actions + 1))
    H = horizon or int(rng.integers(1, max_horizon + 1))
    T = rng.dirichlet(np.ones(S), size=(S, A))
    mask = rng.random((S, A, S)) < sparsity
    keep = rng.integers(0, S, size=(S, A))
    mask[np.arange(S)[:, None], np.arange(A)[None, :], keep] = False
    T = np.where(mask, 0.0, T)
    T /= T.sum(axis=-1, keepdims=True)
    R = rng.choice(np.asarray(reward_levels, dtype=float), size=(S, A))
    beta = rng.dirichlet(np.ones(S))
    gamma = float(rng.choice(np.asarray(discounts, dtype=float)))
    return Mdp(R, T, beta, H, gamma)


def random_policy(rng: np.random.Generator, m: Mdp, *, deterministic: bool = False) -> TabularPolicy:
    H, S, A = m.horizon, m.num_states, m.num_actions
    if deterministic:
        p = np.zeros((H, S, A))
        choice = rng.integers(0, A, size=(H, S))
        np.put_along_axis(p, choice[..., None], 1.0, axis=-1)
        return TabularPolicy(p)
    return TabularPolicy(rng.dirichlet(np.ones(A), size=(H, S)))


# -- reward shaping -----------------------------------------------------------


@dataclass(frozen=True)
class ConstantOffset:
    c: float

    def bonus(self, m: Mdp) -> np.ndarray:
        return np.full(m.reward.shape, float(self.c))

    @property
    def name(self) -> str:
        return f"constant:{self.c:g}"


@dataclass(frozen=True, eq=False)
class NegatedDistance:
    """Bonus ``-E_{s'~T(.|s,a)}[d(s', goal)]`` for an arbitrary metric table."""

    goal: int
    metric: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "metric", _frozen(self.metric))

    def bonus(self, m: Mdp) -> np.ndarray:
        S = m.num_states
        d = self.metric
        if d.shape != (S, S):
            raise ValueError(f"metric table must be ({S}, {S}), got {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("metric table has missing (non-finite) or negative entries")
        if not 0 <= self.goal < S:
            raise ValueError(f"goal state {self.goal} out of range")
        return -(m.transition @ d[:, self.goal])

    @property
    def name(self) -> str:
        return "negdist"


@dataclass(frozen=True, eq=False)
class PotentialBased:
    """Bonus ``gamma * E_{s'}[phi(s')] - phi(s)``."""

    potential: np.ndarray = field(repr=False)
    label: str = "potential"

    def __post_init__(self):
        object.__setattr__(self, "potential", _frozen(self.potential))

    def bonus(self, m: Mdp) -> np.ndarray:
        phi = self.potential
        if phi.shape != (m.num_states,) or not np.all(np.isfinite(phi)):
            raise ValueError(f"potential must be a finite vector of length {m.num_states}")
        return m.discount * (m.transition @ phi) - phi[:, None]

    @property
    def name(self) -> str:
        return self.label


ShapingTransform = ConstantOffset | NegatedDistance | PotentialBased


def apply_shaping(m: Mdp, transform: ShapingTransform) -> Mdp:
    """New MDP whose reward table is ``m.reward + transform.bonus(m)``."""
    bonus = transform.bonus(m)
    if isinstance(transform, ConstantOffset) and transform.c == 0:
        return m.replace()
    return m.replace(reward=m.reward + bonus)


# -- serialization ------------------------------------------------------------

_REQUIRED = ("num_states", "num_actions", "horizon", "discount", "initial_dist", "reward", "transition")


def mdp_to_dict(m: Mdp, policy: TabularPolicy | None = None) -> dict:
    doc = {
        "num_states": m.num_states,
        "num_actions": m.num_actions,
        "horizon": m.horizon,
        "discount": m.discount,
        "initial_dist": m.initial_dist.tolist(),
        "reward": m.reward.tolist(),
        "transition": m.transition.tolist(),
    }
    if policy is not None:
        doc["policy"] = policy.probs.tolist()
    if m.labels is not None:
        doc["labels"] = list(m.labels)
    return doc


def _number_array(value, shape: tuple[int, ...], path: str) -> np.ndarray:
    if not shape:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MdpSchemaError(path, f"expected a number, got {type(value).__name__}")
        return np.asarray(float(value))
    if not isinstance(value, list):
        raise MdpSchemaError(path, f"expected an array of length {shape[0]}")
    if len(value) != shape[0]:
        raise MdpSchemaError(path, f"expected length {shape[0]}, got {len(value)}")
    return np.stack([_number_array(v, shape[1:], f"{path}[{i}]") for i, v in enumerate(value)])


def _int_field(doc: dict, key: str, minimum: int) -> int:
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise MdpSchemaError(key, f"expected an integer >= {minimum}, got {v!r}")
    return v


def mdp_from_dict(doc) -> tuple[Mdp, TabularPolicy | None]:
    if not isinstance(doc, dict):
        raise MdpSchemaError("$", "top level must be a JSON object")
    for key in _REQUIRED:
        if key not in doc:
            raise MdpSchemaError(key, "required field is missing")
    S = _int_field(doc, "num_states", 1)
    A = _int_field(doc, "num_actions", 1)
    H = _int_field(doc, "horizon", 1)
    gamma = float(_number_array(doc["discount"], (), "discount"))
    beta = _number_array(doc["initial_dist"], (S,), "initial_dist")
    R = _number_array(doc["reward"], (S, A), "reward")
    T = _number_array(doc["transition"], (S, A, S), "transition")
    labels = None
    if "labels" in doc:
        labels = doc["labels"]
        if not isinstance(labels, list) or len(labels) != S or not all(isinstance(x, str) for x in labels):
            raise MdpSchemaError("labels", f"expected an array of {S} strings")
    m = Mdp(R, T, beta, H, gamma, labels)
    problems = validate_mdp(m)
    if problems:
        raise InvalidMdpError(problems)
    policy = None
    if "policy" in doc:
        policy = TabularPolicy(_number_array(doc["policy"], (H, S, A), "policy"))
        problems = validate_policy(policy, m)
        if problems:
            raise InvalidMdpError(problems)
    return m, policy


def save_mdp(path, m: Mdp, policy: TabularPolicy | None = None) -> None:
    # json writes floats with repr, which round-trips doubles exactly
    Path(path).write_text(json.dumps(mdp_to_dict(m, policy), indent=1), encoding="utf-8")


def load_mdp(path) -> tuple[Mdp, TabularPolicy | None]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MdpSchemaError("$", f"not valid JSON ({exc})") from exc
    return mdp_from_dict(doc)


def discount_normalizer(m: Mdp) -> float:
    """sum_{h=1}^{H} gamma^{h-1}."""
    return math.fsum(m.discount**h for h in range(m.horizon))
