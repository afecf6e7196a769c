import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from credit_lens.credit import credit_reports
from credit_lens.engine import BudgetExceededError, enumerate_trajectories
from credit_lens.mdp import TabularPolicy, make_bandit, make_chain, make_gridworld, random_mdp, random_policy
from credit_lens.sampling import (
    PLUGIN_MEASURES,
    SampleBatch,
    convergence_sweep,
    plugin_measures,
    sample_trajectories,
    scalar_summary,
    trajectory_uniforms,
)

LN2 = math.log(2)


def _right_policy(m):
    p = np.zeros((m.horizon, m.num_states, m.num_actions))
    p[..., 1] = 1.0
    return TabularPolicy(p)


def test_deterministic_mdp_and_policy_gives_identical_rows():
    m = make_chain(4, 3)
    b = sample_trajectories(m, _right_policy(m), 50, 9)
    assert (b.states == b.states[0]).all() and (b.actions == 1).all()
    assert b.returns[:, 0].tolist() == [1.0] * 50


def test_same_inputs_reproduce_bytes():
    m = make_gridworld(3, 3, (2, 2), 4, slip=0.2)
    a = sample_trajectories(m, "uniform", 500, 123)
    b = sample_trajectories(m, "uniform", 500, 123)
    assert a.to_bytes() == b.to_bytes()
    assert sample_trajectories(m, "uniform", 500, 124).to_bytes() != a.to_bytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**63 - 1))
def test_batches_split_anywhere(split, seed):
    m = make_chain(5, 4)
    whole = sample_trajectories(m, "uniform", 201, seed)
    parts = SampleBatch.concatenate([
        sample_trajectories(m, "uniform", split, seed),
        sample_trajectories(m, "uniform", 201 - split, seed, start=split),
    ])
    assert whole.to_bytes() == parts.to_bytes()


def test_uniform_substreams_are_disjoint():
    u = trajectory_uniforms(7, 0, 10, 3)
    assert u.shape == (10, 8)
    assert np.unique(u).size == u.size


def test_bandit_arm_frequency():
    b = sample_trajectories(make_bandit(), "uniform", 10**5, 42)
    assert abs(b.actions.mean() - 0.5) <= 0.01


def test_sampled_states_respect_support():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = random_mdp(rng)
        pol = random_policy(rng, m)
        b = sample_trajectories(m, pol, 300, 1)
        assert np.all(m.initial_dist[b.states[:, 0]] > 0)
        assert np.all(pol.probs[np.arange(m.horizon), b.states, b.actions] > 0)
        for h in range(m.horizon - 1):
            assert np.all(m.transition[b.states[:, h], b.actions[:, h], b.states[:, h + 1]] > 0)


def test_empirical_frequencies_approach_exact():
    m = make_gridworld(2, 2, (1, 1), 2, slip=0.3)
    t = enumerate_trajectories(m)
    b = sample_trajectories(m, "uniform", 200_000, 5)
    exact = {tuple(np.r_[s, a]): p for s, a, p in zip(t.states, t.actions, t.prob)}
    keys, counts = np.unique(np.column_stack([b.states, b.actions]), axis=0, return_counts=True)
    for k, c in zip(keys, counts):
        assert abs(c / b.n - exact[tuple(k)]) < 0.005


def test_exact_weights_reproduce_exact_path(family_tables):
    for t in family_tables:
        for marginalize in (False, True):
            exact = {r.measure: r for r in credit_reports(t, marginalize_time=marginalize)}
            for r in plugin_measures(SampleBatch.from_table(t), marginalize_time=marginalize):
                for key, v in r.values.items():
                    if r.flags.get(key) == ["missing"]:
                        assert key not in exact[r.measure].values
                        continue
                    assert v == pytest.approx(exact[r.measure].values[key], abs=1e-9)


def test_single_sample_is_degenerate():
    b = sample_trajectories(make_gridworld(3, 3, (2, 2), 3, slip=0.5), "uniform", 1, 0)
    for r in plugin_measures(b):
        finite = [v for v in r.values.values() if not math.isnan(v)]
        assert all(v == 0.0 for v in finite)


def test_unvisited_pairs_missing_not_zero():
    m = make_chain(4, 3)
    b = sample_trajectories(m, _right_policy(m), 10, 0)
    (rep,) = plugin_measures(b, measures=["pairwise_kl"])
    assert math.isnan(rep.values[(1, 0, 0)])
    assert rep.flags[(1, 0, 0)] == ["missing"]
    assert rep.values[(1, 0, 1)] == 0.0


def test_bandit_plugin_sparsity():
    b = sample_trajectories(make_bandit(), "uniform", 10**5, 42)
    assert abs(scalar_summary(plugin_measures(b), "info_sparsity") - LN2) <= 0.02


def test_miller_madow_flag():
    b = sample_trajectories(make_chain(4, 3), "uniform", 200, 3)
    plain = {r.measure: r for r in plugin_measures(b)}
    mm = {r.measure: r for r in plugin_measures(b, miller_madow=True)}
    assert mm["stepwise_reward_entropy"].values[(3,)] != plain["stepwise_reward_entropy"].values[(3,)]
    with pytest.raises(ValueError):
        plugin_measures(SampleBatch.from_table(enumerate_trajectories(make_bandit())), miller_madow=True)


def test_convergence_sweep_shape_and_csv():
    rep = convergence_sweep(make_bandit(), "uniform", "info_sparsity", [100, 1000, 10_000, 100_000], [0, 1, 2])
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == "measure,n,seed_count,median_abs_error,exact_value"
    assert len(lines) == 5
    assert rep.abs_errors(100) == [abs(e - rep.exact_value) for n, _, e in rep.estimates if n == 100]


def test_convergence_on_chain():
    rep = convergence_sweep(make_chain(4, 3), "uniform", "info_sparsity", [100, 100_000], range(10))
    assert rep.median_abs_error(100_000) < rep.median_abs_error(100)


def test_deterministic_mdp_zero_error():
    m = make_chain(4, 3)
    rep = convergence_sweep(m, _right_policy(m), "return_sequence_mi", [10, 100], [0, 1])
    assert all(e == 0.0 for n in rep.n_grid for e in rep.abs_errors(n))


def test_convergence_errors():
    with pytest.raises(ValueError, match="unknown measure"):
        convergence_sweep(make_bandit(), "uniform", "bogus", [10], [0])
    with pytest.raises(BudgetExceededError):
        convergence_sweep(make_gridworld(5, 5, (4, 4), 8), "uniform", "info_sparsity", [10], [0], budget=100)


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        sample_trajectories(make_bandit(), "uniform", 0, 1)


def test_all_plugin_measures_reported():
    b = sample_trajectories(make_chain(3, 2), "uniform", 100, 0)
    names = {r.measure for r in plugin_measures(b)}
    assert set(PLUGIN_MEASURES) <= names
