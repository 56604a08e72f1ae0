"""

Homomorphism

Finite HiT-MDP homomorphisms (f, g_e) over augmented spaces, the two
defining conditions (reward invariance, transition equivariance), policy
lifting, and exact checks of value equivalence and of the ELBO gap of a
lifted policy.

Augmented model of a FiniteHiTMDP with K options:
  R[e, alpha]     = r(s, a)
  T[e, alpha, e'] = P(s'|s, a) * [o'_prev == o]
with e = (s, o_prev) -> s * K + o_prev and alpha = (a, o) -> o * A + a.

"""

import json
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import entr

from lab_settings import read_lab_settings
from lab_errors import ConfigError, ConvergenceError, DimensionError, HomomorphismError
from hitmdp_core import FiniteHiTMDP, TabularPolicies, joint_policy, mdp_to_dict, mdp_from_dict, validate_policies
from tabular_solver import elbo_exact

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

MAX_REPORTED = 10
VALUE_TOL = 1e-10
SPLITS = ('uniform', 'given')


@dataclass
class FiniteHomomorphism:
    """f: e -> e_bar as an int array [S*K]; g_e: alpha -> alpha_bar as an int array [S*K, K*A]"""

    state_option_map: np.ndarray
    action_map: np.ndarray
    base_mdp: FiniteHiTMDP
    abstract_mdp: FiniteHiTMDP

    def __post_init__(self):
        self.state_option_map = np.asarray(self.state_option_map, dtype=int)
        self.action_map = np.asarray(self.action_map, dtype=int)
        base, abstract = self.base_mdp, self.abstract_mdp
        if self.state_option_map.shape != (base.n_aug_states,):
            raise DimensionError(f'state_option_map shape {self.state_option_map.shape} '
                                 f'!= ({base.n_aug_states},)')
        if self.action_map.shape != (base.n_aug_states, base.n_aug_actions):
            raise DimensionError(f'action_map shape {self.action_map.shape} '
                                 f'!= {(base.n_aug_states, base.n_aug_actions)}')
        if self.state_option_map.min() < 0 or self.state_option_map.max() >= abstract.n_aug_states:
            raise DimensionError('state_option_map points outside the abstract augmented states')
        if self.action_map.min() < 0 or self.action_map.max() >= abstract.n_aug_actions:
            raise DimensionError('action_map points outside the abstract augmented actions')


@dataclass
class LiftedPolicy:
    """pi_up(alpha|e) as [S*K, K*A]; within_class_split holds pi_up(alpha|e, g_e(alpha))"""

    table: np.ndarray
    within_class_split: np.ndarray


@dataclass
class ValidationReport:
    passed: bool
    counterexamples: List[dict] = field(default_factory=list)
    structure_issues: List[str] = field(default_factory=list)

    def to_dict(self):
        return {'passed': self.passed, 'counterexamples': self.counterexamples,
                'structure_issues': self.structure_issues}


def augmented_model(mdp):
    ''' Reward [S*K, K*A] and transition [S*K, K*A, S*K] of the augmented process'''

    S, K, A = mdp.shape
    reward = np.broadcast_to(mdp.reward[:, None, None, :], (S, K, K, A)).reshape(S * K, K * A)
    # T[s, p, o, a, s', o''] = P(s'|s,a) [o'' == o]
    transition = np.einsum('sat,oq->soatq', mdp.transition, np.eye(K))
    transition = np.broadcast_to(transition[:, None], (S, K, K, A, S, K)).reshape(S * K, K * A, S * K)
    return reward.copy(), transition.copy()


def _class_counts(h):
    ''' counts[e, beta] = |g_e^{-1}(beta)|'''

    n_abstract = h.abstract_mdp.n_aug_actions
    counts = np.zeros((h.action_map.shape[0], n_abstract), dtype=int)
    rows = np.repeat(np.arange(h.action_map.shape[0]), h.action_map.shape[1])
    np.add.at(counts, (rows, h.action_map.reshape(-1)), 1)
    return counts


def structure_issues(h):
    ''' Surjectivity of f and each g_e, and commutation with the projection to base states'''

    issues = []
    base, abstract = h.base_mdp, h.abstract_mdp
    missing = np.setdiff1d(np.arange(abstract.n_aug_states), h.state_option_map)
    if missing.size:
        issues.append(f'f is not surjective: abstract augmented states {missing.tolist()} have no preimage')
    counts = _class_counts(h)
    for e in np.nonzero((counts == 0).any(axis=1))[0][:MAX_REPORTED]:
        empty = np.nonzero(counts[e] == 0)[0].tolist()
        issues.append(f'g_e for e={int(e)} is not surjective: abstract actions {empty} have no preimage')
    abstract_state = h.state_option_map.reshape(base.n_states, base.n_options) // abstract.n_options
    for s in np.nonzero((abstract_state != abstract_state[:, :1]).any(axis=1))[0][:MAX_REPORTED]:
        issues.append(f'f breaks the bundle projection at base state {int(s)}: '
                      f'abstract states {abstract_state[s].tolist()}')
    return issues


def _pushed_transition(h, transition):
    ''' sum over e' in f^{-1}(e_bar') of T[e, alpha, e'], shape [S*K, K*A, S_bar*K_bar]'''

    onehot = np.zeros((h.base_mdp.n_aug_states, h.abstract_mdp.n_aug_states))
    onehot[np.arange(h.base_mdp.n_aug_states), h.state_option_map] = 1.0
    return transition @ onehot


def validate_homomorphism(h, tol=1e-9):
    """
    Check reward invariance and transition equivariance on every (e, alpha).

    Returns a ValidationReport; on failure it holds the first ten
    violations in (e, alpha) order, rewards before transitions, each with
    the base side as lhs and the abstract side as rhs.
    """

    reward, transition = augmented_model(h.base_mdp)
    abs_reward, abs_transition = augmented_model(h.abstract_mdp)
    f = h.state_option_map
    g = h.action_map
    f_rows = np.broadcast_to(f[:, None], g.shape)

    reward_rhs = abs_reward[f_rows, g]
    pushed = _pushed_transition(h, transition)
    transition_rhs = abs_transition[f_rows, g]

    reward_bad = np.abs(reward - reward_rhs) > tol
    transition_bad = np.abs(pushed - transition_rhs) > tol

    counterexamples = []
    candidates = np.nonzero(reward_bad | transition_bad.any(axis=2))
    for e, alpha in zip(*candidates):
        if reward_bad[e, alpha]:
            counterexamples.append({'condition': 'reward', 'tuple': [int(e), int(alpha)],
                                    'abstract': [int(f[e]), int(g[e, alpha])],
                                    'lhs': float(reward[e, alpha]), 'rhs': float(reward_rhs[e, alpha])})
        for e_next in np.nonzero(transition_bad[e, alpha])[0]:
            counterexamples.append({'condition': 'transition', 'tuple': [int(e), int(alpha), int(e_next)],
                                    'abstract': [int(f[e]), int(g[e, alpha]), int(e_next)],
                                    'lhs': float(pushed[e, alpha, e_next]),
                                    'rhs': float(transition_rhs[e, alpha, e_next])})
        if len(counterexamples) >= MAX_REPORTED:
            break

    issues = structure_issues(h)
    report = ValidationReport(not counterexamples and not issues, counterexamples[:MAX_REPORTED], issues)
    if report.passed:
        logger.info('Homomorphism validated: reward invariance and transition equivariance hold')
    else:
        logger.info(f'Homomorphism check failed with {len(report.counterexamples)} counterexamples '
                    f'and {len(issues)} structural issues')
    return report


def lift_policy(h, abstract_policy, split='uniform', given_split=None):
    """
    Lift an abstract policy to the base augmented process.

    Parameters:
    - h (FiniteHomomorphism): the homomorphism.
    - abstract_policy (TabularPolicies or ndarray): abstract policy, factored
      or as a joint table [S_bar*K_bar, K_bar*A_bar].
    - split (str): 'uniform' spreads each abstract action's mass equally over
      its preimage; 'given' uses given_split renormalized within each class.
    - given_split (ndarray, optional): non-negative weights [S*K, K*A].
    """

    if split not in SPLITS:
        raise ConfigError(f'Unknown lifting split: {split}')
    abstract_joint = _as_joint(h.abstract_mdp, abstract_policy)
    counts = _class_counts(h)
    if np.any(counts == 0):
        raise HomomorphismError('Cannot lift: some g_e has an empty preimage')

    rows = np.arange(h.action_map.shape[0])[:, None]
    if split == 'uniform':
        within = 1.0 / counts[rows, h.action_map]
    else:
        if given_split is None:
            raise ConfigError("split='given' needs given_split weights")
        weights = np.asarray(given_split, dtype=float)
        if weights.shape != h.action_map.shape or np.any(weights < 0):
            raise DimensionError(f'given_split must be non-negative with shape {h.action_map.shape}')
        class_mass = np.zeros(counts.shape)
        np.add.at(class_mass, (np.broadcast_to(rows, h.action_map.shape), h.action_map), weights)
        denom = class_mass[rows, h.action_map]
        within = np.where(denom > 0, weights / np.where(denom > 0, denom, 1.0),
                          1.0 / counts[rows, h.action_map])

    table = abstract_joint[h.state_option_map[:, None], h.action_map] * within
    return LiftedPolicy(table, within)


def pushforward(h, lifted):
    ''' Abstract policy induced by a lifted policy at every base e, shape [S*K, K_bar*A_bar]'''

    out = np.zeros((h.action_map.shape[0], h.abstract_mdp.n_aug_actions))
    rows = np.broadcast_to(np.arange(h.action_map.shape[0])[:, None], h.action_map.shape)
    np.add.at(out, (rows, h.action_map), lifted.table)
    return out


def _as_joint(mdp, policy):

    if isinstance(policy, TabularPolicies):
        validate_policies(policy, mdp)
        return joint_policy(policy)
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_aug_states, mdp.n_aug_actions):
        raise DimensionError(f'Joint policy shape {policy.shape} != {(mdp.n_aug_states, mdp.n_aug_actions)}')
    return policy


def hard_value_iteration(transition, reward, discount, tol=VALUE_TOL, max_sweeps=100000):
    ''' Q* of an augmented model by sup backups'''

    q = np.zeros_like(reward)
    for _ in range(max_sweeps):
        new_q = reward + discount * transition @ q.max(axis=1)
        delta = np.max(np.abs(new_q - q))
        q = new_q
        if delta < tol:
            return q
    raise ConvergenceError(f'Value iteration did not converge in {max_sweeps} sweeps')


def policy_evaluation(transition, reward, policy, discount, tol=VALUE_TOL, max_sweeps=100000):
    ''' Q^pi of an augmented model for a joint policy [n_e, n_alpha]'''

    q = np.zeros_like(reward)
    for _ in range(max_sweeps):
        new_q = reward + discount * transition @ np.einsum('ea,ea->e', policy, q)
        delta = np.max(np.abs(new_q - q))
        q = new_q
        if delta < tol:
            return q
    raise ConvergenceError(f'Policy evaluation did not converge in {max_sweeps} sweeps')


def value_equivalence_gap(h, temps=None, mode='optimal', abstract_policy=None, tol=VALUE_TOL):
    """
    Sup-norm gap between base values and abstract values pulled back through (f, g_e).

    mode 'optimal' compares hard-optimal Q* on both sides; mode 'fixed_policy'
    compares Q of abstract_policy with Q of its uniform lift. Values are
    hard (non-entropic); temps must be None.
    """

    if temps is not None:
        raise ConfigError('Value equivalence is checked on hard values; pass temps=None')
    base_reward, base_transition = augmented_model(h.base_mdp)
    abs_reward, abs_transition = augmented_model(h.abstract_mdp)

    if mode == 'optimal':
        q_base = hard_value_iteration(base_transition, base_reward, h.base_mdp.discount, tol)
        q_abs = hard_value_iteration(abs_transition, abs_reward, h.abstract_mdp.discount, tol)
    elif mode == 'fixed_policy':
        if abstract_policy is None:
            raise ConfigError("mode 'fixed_policy' needs an abstract_policy")
        lifted = lift_policy(h, abstract_policy)
        q_base = policy_evaluation(base_transition, base_reward, lifted.table, h.base_mdp.discount, tol)
        q_abs = policy_evaluation(abs_transition, abs_reward, _as_joint(h.abstract_mdp, abstract_policy),
                                  h.abstract_mdp.discount, tol)
    else:
        raise ConfigError(f'Unknown value equivalence mode: {mode}')

    pulled = q_abs[h.state_option_map[:, None], h.action_map]
    gap = float(np.max(np.abs(q_base - pulled)))
    logger.debug(f'Value equivalence gap ({mode}): {gap:.3g}')
    return gap


def pushforward_initial(h):

    out = np.zeros(h.abstract_mdp.n_aug_states)
    np.add.at(out, h.state_option_map, h.base_mdp.initial.reshape(-1))
    return out.reshape(h.abstract_mdp.n_states, h.abstract_mdp.n_options)


def conditional_entropy_term(h, lifted, horizon):
    ''' E over the lifted process of sum_t H(pi_up(alpha_t|e_t, g_{e_t}(alpha_t)))'''

    base = h.base_mdp
    S, K, A = base.shape
    _, transition = augmented_model(base)
    # H(pi_up(.|e)) - H(pushforward(.|e)) is the expected within-class entropy
    per_state = entr(lifted.table).sum(axis=1) - entr(pushforward(h, lifted)).sum(axis=1)
    d = base.initial.reshape(-1)
    total = 0.0
    for _ in range(horizon):
        total += float(d @ per_state)
        d = np.einsum('e,ea,eat->t', d, lifted.table, transition)
    return total


def elbo_gap(h, abstract_policy, lifted, horizon, method='forward'):
    """
    Gap between the ELBO of a lifted policy and that of the abstract policy.

    Both ELBOs run on the augmented process with unit temperature and the
    zero regularizer, starting from the base initial table and its pushforward.

    Returns:
    - (gap, conditional_entropy_term)
    """

    if h.base_mdp.regularizer_mode != 'zero' or h.abstract_mdp.regularizer_mode != 'zero':
        raise ConfigError('ELBO gap is defined for the zero regularizer')
    if np.max(np.abs(pushforward_initial(h) - h.abstract_mdp.initial)) > 1e-9:
        raise HomomorphismError('Abstract initial table is not the pushforward of the base initial table')
    abstract_joint = _as_joint(h.abstract_mdp, abstract_policy)
    base_elbo = elbo_exact(h.base_mdp, lifted.table, horizon, method=method)
    abstract_elbo = elbo_exact(h.abstract_mdp, abstract_joint, horizon, method=method)
    gap = base_elbo - abstract_elbo
    entropy_term = conditional_entropy_term(h, lifted, horizon)
    if gap < -1e-10 or abs(gap - entropy_term) > 1e-8:
        raise HomomorphismError(f'ELBO gap {gap:.12g} disagrees with conditional entropy {entropy_term:.12g}')
    return gap, entropy_term


def identity_homomorphism(mdp):

    n_e, n_alpha = mdp.n_aug_states, mdp.n_aug_actions
    return FiniteHomomorphism(np.arange(n_e), np.broadcast_to(np.arange(n_alpha), (n_e, n_alpha)).copy(), mdp, mdp)


def compose(h1, h2):
    ''' h2 after h1, for h1: M -> M_bar and h2: M_bar -> M_bar_bar'''

    if h1.abstract_mdp.shape != h2.base_mdp.shape:
        raise DimensionError(f'Cannot compose: {h1.abstract_mdp.shape} != {h2.base_mdp.shape}')
    f = h2.state_option_map[h1.state_option_map]
    g = h2.action_map[h1.state_option_map[:, None], h1.action_map]
    return FiniteHomomorphism(f, g, h1.base_mdp, h2.abstract_mdp)


def build_quotient(base, state_labels, action_labels, n_abstract_actions=None):
    """
    Quotient of a FiniteHiTMDP by a state partition and per-state action relabelling.

    Options are mapped to themselves. Rewards and block transition sums must
    agree on every (s, a) sharing an abstract pair; disagreements raise
    HomomorphismError listing them.

    Parameters:
    - base (FiniteHiTMDP): the base model.
    - state_labels (array [S]): abstract state of each base state.
    - action_labels (array [S, A]): abstract action of each base action.
    """

    state_labels = np.asarray(state_labels, dtype=int)
    action_labels = np.asarray(action_labels, dtype=int)
    S, K, A = base.shape
    if state_labels.shape != (S,) or action_labels.shape != (S, A):
        raise DimensionError('state_labels must be [S] and action_labels [S, A]')
    n_bar = int(state_labels.max()) + 1
    a_bar = int(action_labels.max()) + 1 if n_abstract_actions is None else n_abstract_actions

    block = np.zeros((S, n_bar))
    block[np.arange(S), state_labels] = 1.0
    block_transition = base.transition @ block

    reward = np.full((n_bar, a_bar), np.nan)
    transition = np.full((n_bar, a_bar, n_bar), np.nan)
    problems = []
    for s in range(S):
        for a in range(A):
            sb, ab = state_labels[s], action_labels[s, a]
            if np.isnan(reward[sb, ab]):
                reward[sb, ab] = base.reward[s, a]
                transition[sb, ab] = block_transition[s, a]
                continue
            if abs(reward[sb, ab] - base.reward[s, a]) > 1e-12:
                problems.append(f'reward of (s={s}, a={a}) differs within block ({sb}, {ab})')
            if np.max(np.abs(transition[sb, ab] - block_transition[s, a])) > 1e-12:
                problems.append(f'block transitions of (s={s}, a={a}) differ within block ({sb}, {ab})')
    if np.isnan(reward).any():
        problems.append('some abstract (state, action) pairs have no preimage')
    if problems:
        raise HomomorphismError('Inconsistent quotient: ' + '; '.join(problems[:MAX_REPORTED]))

    initial = block.T @ base.initial
    abstract = FiniteHiTMDP(n_bar, K, a_bar, transition, reward, base.discount, initial, base.regularizer_mode)

    f = (state_labels[:, None] * K + np.arange(K)[None, :]).reshape(-1)
    # g_(s,p)(a, o) = (psi_s(a), o) -> o * A_bar + psi_s(a)
    g = np.arange(K)[None, :, None] * a_bar + action_labels[:, None, :]
    g = np.broadcast_to(g[:, None], (S, K, K, A)).reshape(S * K, K * A)
    return FiniteHomomorphism(f, g, base, abstract)


def mirror_chain_fixture(perturb=0.0, n_options=2, discount=0.9, slip=0.2):
    """
    8-state line with mirror symmetry s <-> 7 - s and its 4-state quotient.

    Actions are 0 = left, 1 = right; a move succeeds with probability
    1 - slip and otherwise stays. Bumping into either end pays 1. The
    quotient keeps the distance to the nearest end and relabels actions as
    0 = outward, 1 = inward. perturb is added to the abstract reward of
    (end state, outward).
    """

    n_states, n_actions = 8, 2
    transition = np.zeros((n_states, n_actions, n_states))
    reward = np.zeros((n_states, n_actions))
    for s in range(n_states):
        for a, step in enumerate((-1, 1)):
            target = min(max(s + step, 0), n_states - 1)
            transition[s, a, target] += 1.0 - slip
            transition[s, a, s] += slip
            if target == s:
                reward[s, a] = 1.0
    initial = np.full((n_states, n_options), 1.0 / (n_states * n_options))
    base = FiniteHiTMDP(n_states, n_options, n_actions, transition, reward, discount, initial)

    state_labels = np.minimum(np.arange(n_states), n_states - 1 - np.arange(n_states))
    action_labels = np.array([[0, 1] if s < n_states // 2 else [1, 0] for s in range(n_states)])
    h = build_quotient(base, state_labels, action_labels)
    return perturb_abstract_reward(h, perturb) if perturb else h


def perturb_abstract_reward(h, delta, state=0, action=0):
    ''' Copy of h whose abstract reward r(state, action) is shifted by delta'''

    abstract = h.abstract_mdp
    reward = abstract.reward.copy()
    reward[state, action] += delta
    return FiniteHomomorphism(h.state_option_map, h.action_map, h.base_mdp,
                              FiniteHiTMDP(abstract.n_states, abstract.n_options, abstract.n_actions,
                                           abstract.transition, reward, abstract.discount, abstract.initial,
                                           abstract.regularizer_mode))


def random_homomorphism(rng, n_abstract_states=3, n_options=2, n_abstract_actions=2, state_copies=2,
                        action_copies=2, discount=0.9):
    ''' Seeded base model built by splitting a random abstract model, with its quotient map'''

    S_bar, K, A_bar = n_abstract_states, n_options, n_abstract_actions
    S, A = S_bar * state_copies, A_bar * action_copies
    abstract_transition = rng.dirichlet(np.ones(S_bar), size=(S_bar, A_bar))
    abstract_reward = rng.uniform(-1.0, 1.0, size=(S_bar, A_bar))
    abstract_initial = rng.dirichlet(np.ones(S_bar * K)).reshape(S_bar, K)

    state_labels = np.repeat(np.arange(S_bar), state_copies)
    action_labels = np.array([rng.permutation(np.arange(A) % A_bar) for _ in range(S)])

    share = rng.dirichlet(np.ones(state_copies), size=S_bar).reshape(-1)
    transition = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            block_mass = abstract_transition[state_labels[s], action_labels[s, a]][state_labels]
            split = rng.dirichlet(np.ones(state_copies), size=S_bar).reshape(-1)
            transition[s, a] = block_mass * split
    reward = abstract_reward[state_labels[:, None], action_labels]
    initial = abstract_initial[state_labels] * share[:, None]

    base = FiniteHiTMDP(S, K, A, transition, reward, discount, initial)
    return build_quotient(base, state_labels, action_labels, A_bar)


def homomorphism_to_dict(h):

    return {'state_option_map': h.state_option_map.tolist(), 'action_map': h.action_map.tolist(),
            'base': mdp_to_dict(h.base_mdp), 'abstract': mdp_to_dict(h.abstract_mdp)}


def homomorphism_from_dict(doc):
    ''' Full form (state_option_map, action_map, base, abstract) or quotient form (base, state_labels, action_labels)'''

    if doc.get('kind') == 'quotient':
        return build_quotient(mdp_from_dict(doc['base']), doc['state_labels'], doc['action_labels'],
                              doc.get('n_abstract_actions'))
    return FiniteHomomorphism(np.array(doc['state_option_map']), np.array(doc['action_map']),
                              mdp_from_dict(doc['base']), mdp_from_dict(doc['abstract']))


def homomorphism_to_json(h, path):

    with open(path, 'w') as file:
        json.dump(homomorphism_to_dict(h), file, indent=1)


def homomorphism_from_json(path):

    with open(path, 'r') as file:
        return homomorphism_from_dict(json.load(file))


def report_to_json(report, path, extra=None):

    doc = report.to_dict()
    if extra:
        doc.update(extra)
    with open(path, 'w') as file:
        json.dump(doc, file, indent=1)
