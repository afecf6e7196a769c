import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from credit_lens.engine import (
    BudgetExceededError,
    ReturnDist,
    UnreachableError,
    categorical_return_dp,
    count_trajectories,
    default_budget,
    enumerate_trajectories,
    forced_return_distribution,
    occupancy,
    return_distribution,
    return_grid,
    state_return_distribution,
    value_functions,
)
from credit_lens.mdp import (
    Mdp,
    PotentialBased,
    TabularPolicy,
    apply_shaping,
    make_bandit,
    make_chain,
    make_gridworld,
    random_mdp,
    random_policy,
    uniform_policy,
)


def test_bandit_table():
    t = enumerate_trajectories(make_bandit())
    assert t.n_rows == 2
    assert t.prob.tolist() == [0.5, 0.5]
    assert t.returns[:, 0].tolist() == [0.0, 1.0]


def test_chain_table_is_canonical():
    t = enumerate_trajectories(make_chain(4, 3))
    assert t.n_rows == 8
    assert np.allclose(t.prob, 1 / 8)
    keys = [tuple(np.column_stack([t.states[i], t.actions[i]]).ravel()) for i in range(t.n_rows)]
    assert keys == sorted(keys)
    # only right-right-right reaches the goal, on the third move
    assert t.returns[:, 0].sum() == 1.0
    assert t.returns[-1].tolist() == [1.0, 1.0, 1.0]


def test_table_probabilities_and_returns(family_tables):
    for t in family_tables:
        assert math.isclose(t.prob.sum(), 1.0, abs_tol=1e-12)
        assert np.all(t.prob > 0)
        g = t.mdp.discount
        H = t.horizon
        direct = sum(g**k * t.rewards[:, k] for k in range(H))
        assert np.allclose(t.returns[:, 0], direct, atol=1e-12)
        assert np.allclose(t.atom_values[t.atom_index], t.returns, atol=1e-9)


def test_count_matches_rows(family_tables):
    for t in family_tables:
        assert count_trajectories(t.mdp, t.policy) == t.n_rows


def test_budget_refused_before_allocation():
    m = make_gridworld(5, 5, (4, 4), 8)
    with pytest.raises(BudgetExceededError) as exc:
        enumerate_trajectories(m, budget=1000)
    # 24 start cells, 4 actions per step, deterministic moves
    assert exc.value.count == 24 * 4**8
    assert "categorical_return_dp" in str(exc.value)


def test_budget_environment_override(monkeypatch):
    monkeypatch.setenv("CREDIT_LENS_BUDGET", "5")
    assert default_budget() == 5
    with pytest.raises(BudgetExceededError):
        enumerate_trajectories(make_chain(4, 3))
    monkeypatch.delenv("CREDIT_LENS_BUDGET")
    assert default_budget() == 10**7


def test_zero_probability_actions_pruned():
    m = make_chain(3, 2)
    p = np.zeros((2, 3, 2))
    p[..., 1] = 1.0
    t = enumerate_trajectories(m, TabularPolicy(p))
    assert t.n_rows == 1
    assert t.actions.tolist() == [[1, 1]]


def test_return_distribution_bandit():
    t = enumerate_trajectories(make_bandit())
    assert return_distribution(t, 1, 0, 1).atoms == [(1.0, 1.0)]
    assert state_return_distribution(t, 1, 0).atoms == [(0.0, 0.5), (1.0, 0.5)]


def test_forced_action_rollout_for_unchosen_action():
    m = make_chain(3, 2)
    p = np.zeros((2, 3, 2))
    p[..., 0] = 1.0
    t = enumerate_trajectories(m, TabularPolicy(p))
    d = return_distribution(t, 1, 0, 1)
    assert d.atoms == forced_return_distribution(m, TabularPolicy(p), 1, 0, 1).atoms
    assert d.mean() == 0.0
    with pytest.raises(UnreachableError):
        return_distribution(t, 2, 2, 0)
    with pytest.raises(ValueError):
        return_distribution(t, 3, 0, 0)


def test_conditional_laws_mix_back_to_marginal(family_tables):
    for t in family_tables[:30]:
        pi = t.policy.probs
        for h in range(1, t.horizon + 1):
            for s in np.unique(t.states[:, h - 1]):
                mix = state_return_distribution(t, h, int(s))
                mean = sum(pi[h - 1, s, a] * return_distribution(t, h, int(s), a).mean()
                           for a in range(t.mdp.num_actions) if pi[h - 1, s, a] > 0)
                assert mix.mean() == pytest.approx(mean, abs=1e-12)


def test_table_means_match_bellman(family_tables):
    for t in family_tables:
        _, q = value_functions(t.mdp, t.policy)
        for h in range(1, t.horizon + 1):
            for s, a in {(int(x), int(y)) for x, y in zip(t.states[:, h - 1], t.actions[:, h - 1])}:
                assert return_distribution(t, h, s, a).mean() == pytest.approx(q[h - 1, s, a], abs=1e-9)


def test_occupancy_identity(family_tables):
    rng = np.random.default_rng(5)
    for t in family_tables:
        occ = occupancy(t)
        g = t.mdp.discount
        disc = g ** np.arange(t.horizon)
        for _ in range(5):
            f = rng.normal(size=(t.mdp.num_states, t.mdp.num_actions))
            lhs = occ.expectation(f)
            rhs = np.dot(t.prob, (f[t.states, t.actions] * disc).sum(axis=1)) / disc.sum()
            assert lhs == pytest.approx(rhs, abs=1e-9)
        assert occ.normalized.sum() == pytest.approx(1.0, abs=1e-12)


def test_return_grid_contains_zero_and_widens_when_degenerate():
    z = return_grid(make_chain(4, 3), 7)
    assert z[0] == 0.0 and z[-1] == 3.0
    flat = Mdp(np.zeros((1, 1)), np.ones((1, 1, 1)), [1.0], 2)
    z = return_grid(flat, 3)
    assert z.tolist() == [-1.0, 0.0, 1.0]


def test_categorical_exact_on_grid_aligned_rewards():
    m = make_chain(4, 3)
    cat = categorical_return_dp(m, "uniform", num_atoms=4)
    t = enumerate_trajectories(m)
    for s, a in [(0, 0), (0, 1)]:
        exact = return_distribution(t, 1, s, a)
        assert cat.dist(1, s, a).wasserstein(exact) == pytest.approx(0.0, abs=1e-12)


def test_categorical_mass_and_bounds(family):
    for m, pol in family:
        cat = categorical_return_dp(m, pol)
        assert np.allclose(cat.probs.sum(axis=-1), 1.0)
        _, q = value_functions(m, pol)
        assert np.max(np.abs(cat.mean() - q)) <= cat.spacing / 2


def test_categorical_scales_past_budget():
    m = make_gridworld(5, 5, (4, 4), 12)
    with pytest.raises(BudgetExceededError):
        enumerate_trajectories(m)
    cat = categorical_return_dp(m, "uniform", 51)
    _, q = value_functions(m)
    assert np.max(np.abs(cat.mean() - q)) <= cat.spacing / 2


def test_return_dist_wasserstein():
    a = ReturnDist(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    b = ReturnDist(np.array([1.0]), np.array([1.0]))
    assert a.wasserstein(b) == pytest.approx(0.5)


def test_trajectory_csv_export(tmp_path):
    t = enumerate_trajectories(make_chain(3, 2))
    text = t.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "prob,s1,a1,s2,a2,r1,r2,z1,z2"
    assert len(lines) == t.n_rows + 1
    t.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_potential_shaping_shifts_q_by_terminal_and_initial_potential(seed):
    # Q'_1(s, a) - Q_1(s, a) = gamma^H E[phi(s_{H+1}) | s_1=s, a_1=a] - phi(s)
    rng = np.random.default_rng(seed)
    m = random_mdp(rng)
    pol = random_policy(rng, m)
    phi = rng.normal(size=m.num_states)
    _, q = value_functions(m, pol)
    _, q2 = value_functions(apply_shaping(m, PotentialBased(phi)), pol)
    dist = m.transition  # law of s_2 given (s_1, a_1)
    for h in range(1, m.horizon):
        step = np.einsum("ta,tau->tu", pol.probs[h], m.transition)
        dist = dist @ step
    expected = m.discount**m.horizon * (dist @ phi) - phi[:, None]
    assert np.allclose(q2[0] - q[0], expected, atol=1e-9)


def test_uniform_policy_default():
    m = make_chain(3, 2)
    t1 = enumerate_trajectories(m)
    t2 = enumerate_trajectories(m, uniform_policy(m))
    assert np.array_equal(t1.prob, t2.prob)
