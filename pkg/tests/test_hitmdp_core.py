import math
import itertools

import numpy as np
import pytest

from conftest import deterministic_mdp
from lab_errors import DimensionError, InvalidDistributionError, EnumerationGuardError
from hitmdp_core import (FiniteHiTMDP, Trajectory, Step, TabularPolicies, LOG_ZERO, NO_OPTION,
                         traj_logprob_smdp, traj_logprob_hitmdp, smdp_step_logfactors, optimality_loglik,
                         mutual_info_regularizer, uniform_policies, random_policies, random_mdp,
                         enumerate_trajectories, sample_trajectories, augmented_occupancy, option_marginal,
                         joint_policy, mdp_to_json, mdp_from_json, validate_mdp)


def _one_option_smdp_policies():
    return TabularPolicies(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.ones((1, 1)), np.ones((1, 1)))


def _hitmdp_product(mdp, pols, states, actions, options):
    ''' Multiply raw table entries along the trajectory'''
    prob = mdp.initial[states[0], options[0]] * pols.action_policy[states[0], options[0], actions[0]]
    for t in range(1, len(states)):
        prob *= mdp.transition[states[t - 1], actions[t - 1], states[t]]
        prob *= pols.option_policy[states[t], options[t - 1], options[t]]
        prob *= pols.action_policy[states[t], options[t], actions[t]]
    return prob


def _smdp_product(mdp, pols, states, actions, options):
    prob = mdp.initial[states[0], options[0]] * pols.action_policy[states[0], options[0], actions[0]]
    for t in range(1, len(states)):
        beta = pols.smdp_termination[options[t - 1], states[t]]
        bracket = (1 - beta) * (options[t] == options[t - 1]) + beta * pols.smdp_master[states[t], options[t]]
        prob *= mdp.transition[states[t - 1], actions[t - 1], states[t]]
        prob *= pols.action_policy[states[t], options[t], actions[t]] * bracket
    return prob


def test_deterministic_one_step_has_zero_logprob():
    mdp = deterministic_mdp()
    tau = Trajectory.from_arrays([0], [0], [0])
    assert traj_logprob_smdp(mdp, _one_option_smdp_policies(), tau) == 0.0
    assert traj_logprob_hitmdp(mdp, _one_option_smdp_policies(), tau) == 0.0


def test_uniform_factors_on_deterministic_dynamics():
    # state 0 and 1 swap under either action
    transition = np.zeros((2, 2, 2))
    transition[0, :, 1] = 1.0
    transition[1, :, 0] = 1.0
    initial = np.array([[0.5, 0.5], [0.0, 0.0]])
    mdp = FiniteHiTMDP(2, 2, 2, transition, np.zeros((2, 2)), 0.9, initial)
    tau = Trajectory.from_arrays([0, 1, 0], [1, 0, 1], [0, 1, 1])
    assert traj_logprob_hitmdp(mdp, uniform_policies(2, 2, 2), tau) == pytest.approx(-4.1588830834, abs=1e-9)


def test_half_tables_match_factor_product():
    mdp = FiniteHiTMDP(2, 2, 2, np.full((2, 2, 2), 0.5), np.zeros((2, 2)), 0.5, np.full((2, 2), 0.25))
    pols = TabularPolicies(np.full((2, 2, 2), 0.5), np.full((2, 2, 2), 0.5), np.full((2, 2), 0.5),
                           np.full((2, 2), 0.5))
    states, actions, options = [0, 1], [1, 0], [0, 1]
    tau = Trajectory.from_arrays(states, actions, options)
    expected = math.log(_smdp_product(mdp, pols, states, actions, options))
    assert traj_logprob_smdp(mdp, pols, tau) == pytest.approx(expected, abs=1e-12)


def test_random_tables_match_factor_product(small_mdp, small_policies, rng):
    samples = sample_trajectories(small_mdp, small_policies, 4, 5, rng)
    for i in range(5):
        states, actions, options = samples['s'][i], samples['a'][i], samples['o'][i]
        tau = Trajectory.from_arrays(states, actions, options)
        assert traj_logprob_hitmdp(small_mdp, small_policies, tau) == pytest.approx(
            math.log(_hitmdp_product(small_mdp, small_policies, states, actions, options)), abs=1e-12)
        assert traj_logprob_smdp(small_mdp, small_policies, tau) == pytest.approx(
            math.log(_smdp_product(small_mdp, small_policies, states, actions, options)), abs=1e-12)


def test_smdp_logprob_splits_at_a_shared_boundary(small_mdp, small_policies):
    tau = Trajectory.from_arrays([0, 2, 1, 1, 0], [1, 0, 0, 1, 1], [0, 0, 1, 1, 0])
    head = Trajectory(tau.steps[:2])
    tail = Trajectory(tau.steps[2:])
    continuation = smdp_step_logfactors(small_mdp, small_policies, head.concat(tail))[2:].sum()
    assert traj_logprob_smdp(small_mdp, small_policies, head.concat(tail)) == pytest.approx(
        traj_logprob_smdp(small_mdp, small_policies, head) + continuation, abs=1e-12)


def test_hitmdp_density_sums_to_one():
    rng = np.random.default_rng(7)
    mdp = random_mdp(2, 2, 2, rng)
    pols = random_policies(2, 2, 2, rng)
    total = sum(prob for _, prob in enumerate_trajectories(mdp, pols, 3))
    assert total == pytest.approx(1.0, abs=1e-9)

    logsum = 0.0
    for s, a, o in itertools.product(itertools.product(range(2), repeat=3), repeat=3):
        logp = traj_logprob_hitmdp(mdp, pols, Trajectory.from_arrays(s, a, o))
        logsum += math.exp(logp) if logp > LOG_ZERO else 0.0
    assert logsum == pytest.approx(1.0, abs=1e-9)


def test_smdp_equals_hitmdp_when_every_step_terminates(small_mdp, rng):
    S, K, A = small_mdp.shape
    master = rng.dirichlet(np.ones(K), size=S)
    option_policy = np.broadcast_to(master[:, None, :], (S, K, K)).copy()
    action_policy = rng.dirichlet(np.ones(A), size=(S, K))
    pols = TabularPolicies(option_policy, action_policy, np.ones((K, S)), master)
    samples = sample_trajectories(small_mdp, pols, 5, 10, rng)
    for i in range(10):
        tau = Trajectory.from_arrays(samples['s'][i], samples['a'][i], samples['o'][i])
        assert traj_logprob_smdp(small_mdp, pols, tau) == pytest.approx(
            traj_logprob_hitmdp(small_mdp, pols, tau), abs=1e-12)


def test_zero_probability_step_gives_sentinel():
    transition = np.zeros((2, 1, 2))
    transition[:, 0, 0] = 1.0
    mdp = FiniteHiTMDP(2, 1, 1, transition, np.zeros((2, 1)), 0.9, np.array([[1.0], [0.0]]))
    pols = TabularPolicies(np.ones((2, 1, 1)), np.ones((2, 1, 1)))
    assert traj_logprob_hitmdp(mdp, pols, Trajectory.from_arrays([0, 1], [0, 0], [0, 0])) == LOG_ZERO


def test_smdp_density_needs_termination_tables(small_mdp):
    tau = Trajectory.from_arrays([0], [0], [0])
    with pytest.raises(DimensionError):
        traj_logprob_smdp(small_mdp, uniform_policies(*small_mdp.shape), tau)


def test_trajectory_rejects_broken_option_chain():
    with pytest.raises(DimensionError):
        Trajectory([Step(0, NO_OPTION, 0, 1), Step(0, 0, 0, 0)])


def test_trajectory_outside_model_is_rejected(small_mdp, small_policies):
    with pytest.raises(DimensionError):
        traj_logprob_hitmdp(small_mdp, small_policies, Trajectory.from_arrays([5], [0], [0]))


def test_optimality_loglik_sums_rewards_and_regularizer():
    mdp = FiniteHiTMDP(2, 1, 2, np.full((2, 2, 2), 0.5), np.array([[1.0, 0.0], [0.0, 2.0]]), 0.9,
                       np.array([[1.0], [0.0]]))
    tau = Trajectory.from_arrays([0, 1], [0, 1], [0, 0])
    assert optimality_loglik(mdp, tau, [-0.1, -0.2]) == pytest.approx(2.7)
    assert optimality_loglik(mdp, Trajectory.from_arrays([1, 0], [0, 1], [0, 0]), [0.0, 0.0]) == 0.0


def test_optimality_loglik_ignores_step_order(small_mdp, rng):
    states, actions = rng.integers(0, 3, size=6), rng.integers(0, 2, size=6)
    f_values = -rng.uniform(size=6)
    order = rng.permutation(6)
    forward = optimality_loglik(small_mdp, Trajectory.from_arrays(states, actions, np.zeros(6, dtype=int)), f_values)
    shuffled = optimality_loglik(small_mdp, Trajectory.from_arrays(states[order], actions[order],
                                                                   np.zeros(6, dtype=int)), f_values[order])
    oracle = sum(small_mdp.reward[s, a] for s, a in zip(states, actions)) + f_values.sum()
    assert forward == pytest.approx(oracle, abs=1e-12)
    assert shuffled == pytest.approx(forward, abs=1e-12)


def test_optimality_loglik_rejects_positive_regularizer(small_mdp):
    with pytest.raises(InvalidDistributionError):
        optimality_loglik(small_mdp, Trajectory.from_arrays([0], [0], [0]), [0.5])


def test_mutual_info_regularizer_values():
    pols = TabularPolicies(np.array([[[0.5, 0.5], [0.25, 0.75]]]), np.full((1, 2, 1), 1.0))
    pols_high = TabularPolicies(np.array([[[0.9, 0.1], [0.1, 0.9]]]), np.full((1, 2, 1), 1.0))
    marginal = np.array([0.5, 0.5])
    assert mutual_info_regularizer(pols, marginal, 0, 0, 0) == 0.0
    assert mutual_info_regularizer(pols, marginal, 0, 1, 0) == pytest.approx(-0.693147, abs=1e-6)
    assert mutual_info_regularizer(pols_high, marginal, 0, 0, 0) == 0.0
    assert mutual_info_regularizer(pols, np.array([1.0, 0.0]), 0, 0, 1) == LOG_ZERO


def test_invalid_tables_are_rejected():
    with pytest.raises(InvalidDistributionError):
        FiniteHiTMDP(1, 1, 1, np.full((1, 1, 1), 0.9), np.zeros((1, 1)), 0.9, np.ones((1, 1)))
    with pytest.raises(InvalidDistributionError):
        deterministic_mdp(discount=1.0)
    with pytest.raises(DimensionError):
        FiniteHiTMDP(2, 1, 1, np.ones((1, 1, 1)), np.zeros((1, 1)), 0.9, np.ones((1, 1)))
    with pytest.raises(InvalidDistributionError):
        TabularPolicies(np.ones((1, 1, 1)), np.array([[[0.7, 0.7]]]))


def test_edited_model_fails_revalidation(small_mdp):
    validate_mdp(small_mdp)
    small_mdp.regularizer_mode = 'entropy'
    with pytest.raises(InvalidDistributionError, match='regularizer'):
        validate_mdp(small_mdp)
    small_mdp.regularizer_mode = 'zero'
    small_mdp.reward[0, 0] = np.nan
    with pytest.raises(InvalidDistributionError, match='reward'):
        validate_mdp(small_mdp)


def test_enumeration_guard():
    mdp = random_mdp(2, 2, 2, np.random.default_rng(0))
    with pytest.raises(EnumerationGuardError):
        list(enumerate_trajectories(mdp, uniform_policies(2, 2, 2), 3, guard=100))


def test_sampled_trajectories_follow_the_option_chain(small_mdp, small_policies, rng):
    samples = sample_trajectories(small_mdp, small_policies, 6, 50, rng)
    assert np.all(samples['o_prev'][:, 0] == NO_OPTION)
    assert np.array_equal(samples['o_prev'][:, 1:], samples['o'][:, :-1])
    assert np.allclose(samples['r'], small_mdp.reward[samples['s'], samples['a']])


def test_occupancy_and_marginal_are_distributions(small_mdp, small_policies):
    occupancy = augmented_occupancy(small_mdp, small_policies, n_steps=50)
    assert occupancy.sum() == pytest.approx(1.0, abs=1e-12)
    assert option_marginal(small_policies, occupancy).sum() == pytest.approx(1.0, abs=1e-12)


def test_joint_policy_rows_factor(small_policies):
    joint = joint_policy(small_policies)
    S, K, A = small_policies.shape
    assert joint.shape == (S * K, K * A)
    assert np.allclose(joint.sum(axis=1), 1.0)
    # e = (s=1, o_prev=0), alpha = (a=1, o=1)
    assert joint[1 * K + 0, 1 * A + 1] == pytest.approx(
        small_policies.option_policy[1, 0, 1] * small_policies.action_policy[1, 1, 1])


def test_mdp_json_file(small_mdp, tmp_path):
    path = tmp_path / 'mdp.json'
    mdp_to_json(small_mdp, path)
    loaded = mdp_from_json(path)
    assert loaded.shape == small_mdp.shape
    assert np.array_equal(loaded.transition, small_mdp.transition)
