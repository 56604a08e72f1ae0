import os

import numpy as np
import pytest

from lab_settings import read_lab_settings
from lab_errors import ConfigError, HomomorphismError
from tabular_solver import TemperaturePair
from hitmdp_core import FiniteHiTMDP, random_mdp, random_policies, joint_policy, sample_categorical
from homomorphism import (FiniteHomomorphism, augmented_model, validate_homomorphism, structure_issues, lift_policy,
                          pushforward, value_equivalence_gap, conditional_entropy_term, elbo_gap,
                          identity_homomorphism, compose, build_quotient, mirror_chain_fixture,
                          perturb_abstract_reward, random_homomorphism, homomorphism_to_json,
                          homomorphism_from_json, report_to_json, hard_value_iteration,
                          policy_evaluation)


@pytest.fixture
def mirror():
    return mirror_chain_fixture()


@pytest.fixture
def split_instance():
    ''' Random base model with two concrete actions per abstract action'''
    return random_homomorphism(np.random.default_rng(17))


def _abstract_policy(h, seed=0):
    return random_policies(*h.abstract_mdp.shape, np.random.default_rng(seed))


def test_identity_validates_with_zero_gaps(small_mdp, small_policies):
    h = identity_homomorphism(small_mdp)
    assert validate_homomorphism(h).passed
    assert value_equivalence_gap(h) == 0.0
    lifted = lift_policy(h, small_policies)
    assert np.allclose(lifted.table, joint_policy(small_policies), atol=1e-15)
    gap, entropy_term = elbo_gap(h, small_policies, lifted, 2)
    assert gap == pytest.approx(0.0, abs=1e-12)
    assert entropy_term == pytest.approx(0.0, abs=1e-12)


def test_mirror_quotient_validates(mirror):
    assert mirror.base_mdp.n_states == 8 and mirror.abstract_mdp.n_states == 4
    report = validate_homomorphism(mirror)
    assert report.passed
    assert report.counterexamples == [] and report.structure_issues == []


def test_mirror_quotient_by_direct_summation(mirror):
    base, abstract = mirror.base_mdp, mirror.abstract_mdp
    labels = [0, 1, 2, 3, 3, 2, 1, 0]
    for s in range(8):
        for a in range(2):
            abstract_action = a if s < 4 else 1 - a
            assert base.reward[s, a] == abstract.reward[labels[s], abstract_action]
            for target in range(4):
                mass = sum(base.transition[s, a, t] for t in range(8) if labels[t] == target)
                assert mass == pytest.approx(abstract.transition[labels[s], abstract_action, target], abs=1e-12)


def test_perturbed_reward_is_reported(mirror):
    h = perturb_abstract_reward(mirror, 0.1)
    report = validate_homomorphism(h)
    assert not report.passed
    assert 0 < len(report.counterexamples) <= 10
    first = report.counterexamples[0]
    assert first['condition'] == 'reward'
    abstract_e, abstract_alpha = first['abstract']
    K, A_bar = h.abstract_mdp.n_options, h.abstract_mdp.n_actions
    assert abstract_e // K == 0 and abstract_alpha % A_bar == 0
    assert first['rhs'] - first['lhs'] == pytest.approx(0.1)


def test_counterexamples_reproduce_violations(mirror):
    h = perturb_abstract_reward(mirror, 0.1)
    reward, _ = augmented_model(h.base_mdp)
    abs_reward, _ = augmented_model(h.abstract_mdp)
    for example in validate_homomorphism(h).counterexamples:
        e, alpha = example['tuple'][:2]
        assert abs(reward[e, alpha] - abs_reward[h.state_option_map[e], h.action_map[e, alpha]]) >= 1e-9


def test_transition_violation_is_reported(mirror):
    abstract = mirror.abstract_mdp
    skewed = abstract.transition.copy()
    skewed[1, 0] = [0.5, 0.5, 0.0, 0.0]
    bad = FiniteHomomorphism(mirror.state_option_map, mirror.action_map, mirror.base_mdp,
                             FiniteHiTMDP(4, 2, 2, skewed, abstract.reward, abstract.discount, abstract.initial))
    report = validate_homomorphism(bad)
    assert not report.passed
    assert {example['condition'] for example in report.counterexamples} == {'transition'}


def test_non_surjective_action_map_is_a_structure_issue(mirror):
    h = FiniteHomomorphism(mirror.state_option_map, np.zeros_like(mirror.action_map), mirror.base_mdp,
                           mirror.abstract_mdp)
    assert structure_issues(h)
    assert not validate_homomorphism(h).passed
    with pytest.raises(HomomorphismError):
        lift_policy(h, _abstract_policy(h))


def test_inconsistent_quotient_is_rejected():
    mdp = random_mdp(4, 1, 2, np.random.default_rng(2))
    with pytest.raises(HomomorphismError):
        build_quotient(mdp, [0, 0, 1, 1], [[0, 1]] * 4)


def test_uniform_lift_splits_class_mass(split_instance):
    h = split_instance
    policy = _abstract_policy(h, 4)
    lifted = lift_policy(h, policy)
    abstract_joint = joint_policy(policy)
    for e in range(h.base_mdp.n_aug_states):
        for alpha in range(h.base_mdp.n_aug_actions):
            beta = h.action_map[e, alpha]
            assert lifted.table[e, alpha] == pytest.approx(abstract_joint[h.state_option_map[e], beta] / 2)
    assert np.max(np.abs(pushforward(h, lifted) - abstract_joint[h.state_option_map])) < 1e-12


def test_given_split_keeps_the_pushforward(split_instance):
    h = split_instance
    policy = _abstract_policy(h, 5)
    weights = np.random.default_rng(6).uniform(0.1, 1.0, size=h.action_map.shape)
    lifted = lift_policy(h, policy, split='given', given_split=weights)
    assert np.max(np.abs(pushforward(h, lifted) - joint_policy(policy)[h.state_option_map])) < 1e-12
    with pytest.raises(ConfigError):
        lift_policy(h, policy, split='given')


def test_mirror_value_gaps(mirror):
    assert value_equivalence_gap(mirror, mode='optimal') < 1e-6
    assert value_equivalence_gap(mirror, mode='fixed_policy', abstract_policy=_abstract_policy(mirror)) < 1e-6


def test_random_quotient_value_gaps(split_instance):
    assert validate_homomorphism(split_instance).passed
    assert value_equivalence_gap(split_instance) < 1e-6
    assert value_equivalence_gap(split_instance, mode='fixed_policy',
                                 abstract_policy=_abstract_policy(split_instance, 8)) < 1e-6


def test_self_loop_backups_match_geometric_sums():
    transition = np.ones((1, 2, 1))
    reward = np.array([[1.0, 0.0]])
    q = hard_value_iteration(transition, reward, 0.9)
    assert q == pytest.approx(np.array([[10.0, 9.0]]), abs=1e-6)
    q_uniform = policy_evaluation(transition, reward, np.array([[0.5, 0.5]]), 0.9)
    assert q_uniform == pytest.approx(np.array([[5.5, 4.5]]), abs=1e-6)


def test_value_gap_rejects_temperatures(mirror):
    with pytest.raises(ConfigError):
        value_equivalence_gap(mirror, temps=TemperaturePair())
    with pytest.raises(ConfigError):
        value_equivalence_gap(mirror, mode='fixed_policy')


def test_pair_classes_give_log_two_at_horizon_one(split_instance):
    policy = _abstract_policy(split_instance, 1)
    lifted = lift_policy(split_instance, policy)
    gap, entropy_term = elbo_gap(split_instance, policy, lifted, 1)
    assert entropy_term == pytest.approx(0.693147, abs=1e-6)
    assert gap == pytest.approx(entropy_term, abs=1e-8)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_elbo_gap_equals_conditional_entropy(split_instance, seed):
    policy = _abstract_policy(split_instance, seed)
    weights = np.random.default_rng(seed + 10).uniform(0.05, 1.0, size=split_instance.action_map.shape)
    lifted = lift_policy(split_instance, policy, split='given', given_split=weights)
    gap, entropy_term = elbo_gap(split_instance, policy, lifted, 3)
    assert gap >= -1e-10
    assert abs(gap - entropy_term) < 1e-8
    forward_gap, _ = elbo_gap(split_instance, policy, lifted, 2)
    enumerated_gap, _ = elbo_gap(split_instance, policy, lifted, 2, method='enumerate')
    assert forward_gap == pytest.approx(enumerated_gap, abs=1e-10)


def test_conditional_entropy_matches_monte_carlo(split_instance):
    h = split_instance
    rng = np.random.default_rng(31)
    weights = rng.uniform(0.05, 1.0, size=h.action_map.shape)
    lifted = lift_policy(h, _abstract_policy(h, 3), split='given', given_split=weights)
    _, transition = augmented_model(h.base_mdp)
    # entropy of the within-class split of (e, beta)
    n_e, n_alpha = h.action_map.shape
    class_entropy = np.zeros((n_e, h.abstract_mdp.n_aug_actions))
    for e in range(n_e):
        for beta in np.unique(h.action_map[e]):
            p = lifted.within_class_split[e, h.action_map[e] == beta]
            class_entropy[e, beta] = -np.sum(p * np.log(p))

    n = 100000
    e = sample_categorical(np.broadcast_to(h.base_mdp.initial.reshape(-1), (n, n_e)), rng)
    values = np.zeros(n)
    for _ in range(2):
        alpha = sample_categorical(lifted.table[e], rng)
        values += class_entropy[e, h.action_map[e, alpha]]
        e = sample_categorical(transition[e, alpha], rng)
    exact = conditional_entropy_term(h, lifted, 2)
    assert abs(values.mean() - exact) < 3 * values.std() / np.sqrt(n)


def test_composition_validates(split_instance):
    middle = split_instance.abstract_mdp
    rng = np.random.default_rng(8)
    relabel = np.array([rng.permutation(middle.n_actions) for _ in range(middle.n_states)])
    second = build_quotient(middle, np.arange(middle.n_states), relabel)
    assert validate_homomorphism(second).passed
    composed = compose(split_instance, second)
    assert validate_homomorphism(composed).passed
    assert validate_homomorphism(compose(identity_homomorphism(split_instance.base_mdp), split_instance)).passed


def test_bundled_fixture_matches_builtin(mirror):
    path = os.path.join(read_lab_settings()['settings_dir'], 'mirror_quotient.json')
    h = homomorphism_from_json(path)
    assert np.array_equal(h.state_option_map, mirror.state_option_map)
    assert np.array_equal(h.action_map, mirror.action_map)
    assert np.allclose(h.abstract_mdp.transition, mirror.abstract_mdp.transition, atol=1e-12)
    assert np.allclose(h.abstract_mdp.reward, mirror.abstract_mdp.reward)
    assert validate_homomorphism(h).passed


def test_full_form_file_and_report(tmp_path, split_instance):
    homomorphism_to_json(split_instance, tmp_path / 'h.json')
    loaded = homomorphism_from_json(tmp_path / 'h.json')
    report = validate_homomorphism(loaded)
    assert report.passed
    report_to_json(report, tmp_path / 'report.json', {'status': 'pass'})
    assert '"status": "pass"' in (tmp_path / 'report.json').read_text()
