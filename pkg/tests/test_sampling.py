import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brute import random_mdp, random_policy
from drlope.errors import IdentifiabilityError, ParseError
from drlope.mdp import Policy, TabularMdp, state_kernel, stationary_distribution
from drlope.sampling import (
    TrajectoryDataset,
    dataset_from_csv,
    dataset_to_csv,
    derive_seed,
    expected_transitions,
    sample_trajectories,
    sample_transitions,
    trajectory_to_transitions,
    transitions_to_trajectories,
)


def cycle_mdp():
    """Deterministic 3-state ring: action 0 moves right, action 1 stays."""
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
        P[s, 1, s] = 1.0
    return TabularMdp(P, np.full((3, 2), 0.5), np.zeros((3, 2)), 0.9, 1.0)


def test_minimal_trajectory():
    mdp, pi = random_mdp(1, S=3, A=2), random_policy(2, 3, 2)
    ds = sample_trajectories(mdp, pi, 1, 0, "ArbitraryInit", seed=0)
    assert ds.states.shape == (1, 2) and ds.actions.shape == (1, 1)
    assert (ds.N, ds.T, ds.n) == (1, 0, 1)


def test_deterministic_path():
    pi = Policy(np.tile([1.0, 0.0], (3, 1)), np.array([0.0, 1.0, 0.0]))
    ds = sample_trajectories(cycle_mdp(), pi, 2, 4, "ArbitraryInit", seed=3)
    np.testing.assert_array_equal(ds.states[0], [1, 2, 0, 1, 2, 0])
    np.testing.assert_array_equal(ds.actions, 0)
    np.testing.assert_array_equal(ds.rewards, 0.5)


def test_stationary_visit_frequencies():
    mdp, pi = random_mdp(7, S=5, A=2), random_policy(8, 5, 2)
    ds = sample_trajectories(mdp, pi, 10_000, 100, seed=11)
    freq = np.bincount(ds.states[:, :-1].ravel(), minlength=5) / ds.n
    tv = 0.5 * np.abs(freq - stationary_distribution(mdp, pi)).sum()
    assert tv < 0.02


def test_burn_in_records_law_of_first_state():
    mdp, pi = random_mdp(7, S=4, A=2), random_policy(8, 4, 2)
    start = np.array([1.0, 0, 0, 0])
    ds = sample_trajectories(mdp, pi, 50, 3, "ErgodicBurnIn", burn_in=5, seed=1,
                             initial_dist=start)
    expected = start @ np.linalg.matrix_power(state_kernel(mdp, pi), 5)
    np.testing.assert_allclose(ds.initial_dist, expected)
    assert ds.regime_tag == "ErgodicBurnIn"


def test_burn_in_first_state_law_matches_empirically():
    mdp, pi = random_mdp(9, S=3, A=2), random_policy(10, 3, 2)
    start = np.array([1.0, 0, 0])
    ds = sample_trajectories(mdp, pi, 20_000, 0, "ErgodicBurnIn", burn_in=2, seed=5,
                             initial_dist=start)
    freq = np.bincount(ds.states[:, 0], minlength=3) / ds.N
    p = ds.initial_dist
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / ds.N) + 1e-12)


def test_reducible_chain_rejected_under_stationary_init():
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    mdp = TabularMdp(P, np.zeros((2, 1)), np.zeros((2, 1)), 0.9, 1.0)
    pi = Policy(np.ones((2, 1)), np.array([0.5, 0.5]))
    with pytest.raises(IdentifiabilityError):
        sample_trajectories(mdp, pi, 1, 3, seed=0)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_same_seed_same_data(seed):
    mdp, pi = random_mdp(3, S=4, A=3), random_policy(4, 4, 3)
    a = sample_trajectories(mdp, pi, 3, 6, seed=seed)
    b = sample_trajectories(mdp, pi, 3, 6, seed=seed)
    for name in ("states", "actions", "rewards"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    x = sample_transitions(mdp, pi, pi.initial_dist, 20, seed)
    y = sample_transitions(mdp, pi, pi.initial_dist, 20, seed)
    np.testing.assert_array_equal(x.r, y.r)
    np.testing.assert_array_equal(x.s_next, y.s_next)


def test_derived_seeds_are_distinct():
    seeds = {tuple(derive_seed(1, cell, rep, stream).generate_state(4))
             for cell in range(4) for rep in range(50) for stream in range(5)}
    assert len(seeds) == 4 * 50 * 5
    a, b = derive_seed(1, 0, 3, 0), derive_seed(1, 0, 3, 0)
    np.testing.assert_array_equal(a.generate_state(4), b.generate_state(4))


def test_empty_transition_sample():
    mdp, pi = random_mdp(3, S=4, A=3), random_policy(4, 4, 3)
    assert sample_transitions(mdp, pi, pi.initial_dist, 0, 0).n == 0


def test_point_mass_transitions():
    pi = Policy(np.tile([0.0, 1.0], (3, 1)), np.ones(3) / 3)
    ds = sample_transitions(cycle_mdp(), pi, [0, 0, 1.0], 10, 0)
    assert set(zip(ds.s.tolist(), ds.a.tolist(), ds.s_next.tolist())) == {(2, 1, 2)}


def test_invalid_state_dist():
    mdp, pi = random_mdp(3, S=4, A=3), random_policy(4, 4, 3)
    with pytest.raises(ValueError):
        sample_transitions(mdp, pi, [0.5, 0.5], 10, 0)


def test_transition_frequencies_and_reward_means():
    mdp, pi = random_mdp(21, S=3, A=2), random_policy(22, 3, 2)
    d = np.array([0.2, 0.3, 0.5])
    n = 200_000
    ds = sample_transitions(mdp, pi, d, n, 4)
    exact = d[:, None, None] * pi.action_probs[:, :, None] * mdp.transition
    counts = np.zeros_like(exact)
    np.add.at(counts, (ds.s, ds.a, ds.s_next), 1)
    z = (counts / n - exact) / np.sqrt(exact * (1 - exact) / n + 1e-300)
    assert np.max(np.abs(z[exact > 0])) < 4.5
    for s in range(3):
        for a in range(2):
            m = (ds.s == s) & (ds.a == a)
            bound = 3 * np.sqrt(mdp.reward_var[s, a] / m.sum())
            assert abs(ds.r[m].mean() - mdp.reward_mean[s, a]) <= max(bound, 1e-12)


def test_two_point_rewards_in_support():
    mdp = random_mdp(5, S=3, A=2, noise="two_point")
    pi = random_policy(6, 3, 2)
    ds = sample_transitions(mdp, pi, pi.initial_dist, 5000, 1)
    assert set(np.unique(ds.r).tolist()) <= {0.0, 1.0}


def test_trajectory_to_transitions_counts():
    mdp, pi = random_mdp(3, S=4, A=3), random_policy(4, 4, 3)
    one = sample_trajectories(mdp, pi, 1, 1, "ArbitraryInit", seed=0)
    tr = trajectory_to_transitions(one)
    assert tr.t.tolist() == [0, 1] and tr.s_next[0] == tr.s[1]
    ds = sample_trajectories(mdp, pi, 3, 4, "ArbitraryInit", seed=0)
    tr = trajectory_to_transitions(ds)
    # each trajectory of horizon T contributes T + 1 transitions
    assert tr.n == 15 and set(tr.traj_id.tolist()) == {0, 1, 2}
    assert tr.source == "FromTrajectories"


@given(N=st.integers(1, 5), T=st.integers(0, 6), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_trajectory_round_trip(N, T, seed):
    mdp, pi = random_mdp(3, S=4, A=3), random_policy(4, 4, 3)
    ds = sample_trajectories(mdp, pi, N, T, "ArbitraryInit", seed=seed)
    tr = trajectory_to_transitions(ds)
    perm = np.random.default_rng(seed).permutation(tr.n)
    back = transitions_to_trajectories(tr.subset(perm))
    np.testing.assert_array_equal(back.states, ds.states)
    np.testing.assert_array_equal(back.rewards, ds.rewards)


def test_broken_chain_rejected():
    tr = trajectory_to_transitions(TrajectoryDataset([[0, 1, 2]], [[0, 0]], [[0.0, 0.0]]))
    broken = type(tr)(tr.s, tr.a, tr.r, [2, 2], tr.traj_id, tr.t)
    with pytest.raises(ValueError, match="chain"):
        transitions_to_trajectories(broken)


def test_csv_round_trip_bit_exact():
    mdp, pi = random_mdp(3, S=4, A=3), random_policy(4, 4, 3)
    tr = trajectory_to_transitions(sample_trajectories(mdp, pi, 3, 5, seed=2))
    back = dataset_from_csv(dataset_to_csv(tr))
    for name in ("s", "a", "r", "s_next", "traj_id", "t"):
        np.testing.assert_array_equal(getattr(back, name), getattr(tr, name))


def test_csv_errors():
    with pytest.raises(ParseError, match="header"):
        dataset_from_csv("a,b\n")
    with pytest.raises(ParseError) as err:
        dataset_from_csv("traj_id,t,s,a,r,s_next\n0,0,1,x,0.5,1\n")
    assert (err.value.line, err.value.column) == (2, 4)


def test_expected_transitions_weights_sum_to_one():
    mdp, pi = random_mdp(3, S=4, A=3), random_policy(4, 4, 3)
    ex = expected_transitions(mdp, pi, pi.initial_dist)
    assert ex.weights.sum() == pytest.approx(1.0)
    assert ex.average(ex.r) == pytest.approx(
        np.sum(pi.initial_dist[:, None] * pi.action_probs * mdp.reward_mean))
