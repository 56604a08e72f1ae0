"""

HiT-MDP core

Probabilistic objects of the hidden temporal option framework for finite
spaces: the FiniteHiTMDP model, trajectories, tabular option/action
policies, the SMDP and HiT-MDP trajectory densities, the optimality
log-likelihood and the clamped mutual-information regularizer.

Augmented indexing used throughout the lab:
  augmented state   e = (s, o_prev)  ->  s * K + o_prev
  augmented action  alpha = (a, o)   ->  o * A + a

"""

import json
import logging
import itertools
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from lab_settings import read_lab_settings
from lab_errors import DimensionError, InvalidDistributionError, EnumerationGuardError

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

LOG_ZERO = -1e30
NO_OPTION = -1
PROB_TOL = 1e-12
ENUMERATION_GUARD = 10**7
REGULARIZER_MODES = ('zero', 'mutual_info')


def _check_distribution(table, axis, name, tol=PROB_TOL):
    ''' Raise if table is not a family of distributions along axis'''

    if not np.all(np.isfinite(table)):
        raise InvalidDistributionError(f'{name} has non-finite entries')
    if np.any(table < 0):
        raise InvalidDistributionError(f'{name} has negative entries (min {table.min():.3g})')
    sums = table.sum(axis=axis)
    worst = np.max(np.abs(sums - 1.0))
    if worst > tol:
        raise InvalidDistributionError(f'{name} rows do not sum to 1 (worst deviation {worst:.3g})')


def _safe_log(x):
    ''' Natural log with zero mapped to the LOG_ZERO sentinel'''

    x = np.asarray(x, dtype=float)
    with np.errstate(divide='ignore'):
        out = np.log(x)
    return np.where(x > 0, out, LOG_ZERO)


@dataclass
class FiniteHiTMDP:
    """Finite HiT-MDP: P(s'|s,a) [S,A,S], r(s,a) [S,A], discount, P(s0,o0) [S,K]"""

    n_states: int
    n_options: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial: np.ndarray
    regularizer_mode: str = 'zero'

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        self.discount = float(self.discount)
        validate_mdp(self)

    @property
    def shape(self):
        return self.n_states, self.n_options, self.n_actions

    @property
    def n_aug_states(self):
        return self.n_states * self.n_options

    @property
    def n_aug_actions(self):
        return self.n_actions * self.n_options


@dataclass
class Step:
    s: int
    o_prev: int
    a: int
    o: int
    r: float = 0.0


@dataclass
class Trajectory:
    """Ordered steps (s, o_prev, a, o, r); step 0 carries o_prev = NO_OPTION"""

    steps: List[Step] = field(default_factory=list)

    def __post_init__(self):
        for t in range(1, len(self.steps)):
            if self.steps[t].o_prev != self.steps[t - 1].o:
                raise DimensionError(f'Trajectory step {t}: o_prev {self.steps[t].o_prev} '
                                     f'does not continue option {self.steps[t - 1].o}')

    @property
    def horizon(self):
        return len(self.steps)

    @classmethod
    def from_arrays(cls, states, actions, options, rewards=None):
        ''' Build a trajectory from per-step state, action and option ids'''

        if rewards is None:
            rewards = np.zeros(len(states))
        steps = []
        o_prev = NO_OPTION
        for s, a, o, r in zip(states, actions, options, rewards):
            steps.append(Step(int(s), int(o_prev), int(a), int(o), float(r)))
            o_prev = o
        return cls(steps)

    def concat(self, other):
        return Trajectory(self.steps + other.steps)


@dataclass
class TabularPolicies:
    """pi^O(o|s,o_prev) [S,K,K], pi^A(a|s,o) [S,K,A]; SMDP tables beta_o(s) [K,S], P(o|s) [S,K]"""

    option_policy: np.ndarray
    action_policy: np.ndarray
    smdp_termination: Optional[np.ndarray] = None
    smdp_master: Optional[np.ndarray] = None

    def __post_init__(self):
        self.option_policy = np.asarray(self.option_policy, dtype=float)
        self.action_policy = np.asarray(self.action_policy, dtype=float)
        if self.smdp_termination is not None:
            self.smdp_termination = np.asarray(self.smdp_termination, dtype=float)
        if self.smdp_master is not None:
            self.smdp_master = np.asarray(self.smdp_master, dtype=float)
        validate_policies(self)

    @property
    def shape(self):
        S, K, A = self.action_policy.shape
        return S, K, A

    @property
    def has_smdp(self):
        return self.smdp_termination is not None and self.smdp_master is not None


def validate_mdp(mdp):
    ''' Check dimensions and distribution invariants of a FiniteHiTMDP'''

    S, K, A = mdp.n_states, mdp.n_options, mdp.n_actions
    if min(S, K, A) < 1:
        raise DimensionError(f'State, option and action counts must be >= 1, got {(S, K, A)}')
    if mdp.transition.shape != (S, A, S):
        raise DimensionError(f'transition shape {mdp.transition.shape} != {(S, A, S)}')
    if mdp.reward.shape != (S, A):
        raise DimensionError(f'reward shape {mdp.reward.shape} != {(S, A)}')
    if mdp.initial.shape != (S, K):
        raise DimensionError(f'initial shape {mdp.initial.shape} != {(S, K)}')
    if not np.all(np.isfinite(mdp.reward)):
        raise InvalidDistributionError('reward has non-finite entries')
    if not 0.0 <= mdp.discount < 1.0:
        raise InvalidDistributionError(f'discount must lie in [0, 1), got {mdp.discount}')
    if mdp.regularizer_mode not in REGULARIZER_MODES:
        raise InvalidDistributionError(f'Unknown regularizer mode: {mdp.regularizer_mode}')
    _check_distribution(mdp.transition, 2, 'transition')
    _check_distribution(mdp.initial.reshape(-1), 0, 'initial')


def validate_policies(pols, mdp=None):
    ''' Check shapes and normalization of tabular policies, optionally against an mdp'''

    if pols.action_policy.ndim != 3:
        raise DimensionError(f'action_policy must be [S,K,A], got shape {pols.action_policy.shape}')
    S, K, A = pols.action_policy.shape
    if pols.option_policy.shape != (S, K, K):
        raise DimensionError(f'option_policy shape {pols.option_policy.shape} != {(S, K, K)}')
    if mdp is not None and (S, K, A) != mdp.shape:
        raise DimensionError(f'Policies are {(S, K, A)} but the mdp is {mdp.shape}')
    _check_distribution(pols.option_policy, 2, 'option_policy')
    _check_distribution(pols.action_policy, 2, 'action_policy')
    if pols.smdp_termination is not None:
        beta = pols.smdp_termination
        if beta.shape != (K, S):
            raise DimensionError(f'smdp_termination shape {beta.shape} != {(K, S)}')
        if np.any(beta < 0) or np.any(beta > 1):
            raise InvalidDistributionError('smdp_termination entries must lie in [0, 1]')
    if pols.smdp_master is not None:
        if pols.smdp_master.shape != (S, K):
            raise DimensionError(f'smdp_master shape {pols.smdp_master.shape} != {(S, K)}')
        _check_distribution(pols.smdp_master, 1, 'smdp_master')


def _check_trajectory(mdp, tau):

    S, K, A = mdp.shape
    if tau.horizon == 0:
        raise DimensionError('Trajectory has no steps')
    for t, step in enumerate(tau.steps):
        if not (0 <= step.s < S and 0 <= step.a < A and 0 <= step.o < K):
            raise DimensionError(f'Trajectory step {t} ({step.s}, {step.a}, {step.o}) outside {(S, A, K)}')
        if t == 0 and step.o_prev != NO_OPTION:
            raise DimensionError(f'Trajectory step 0 must have o_prev={NO_OPTION}, got {step.o_prev}')


def smdp_step_logfactors(mdp, pols, tau):
    ''' Per-step log factors of the SMDP option density.

    Entry 0 holds log P(s0,o0) + log P_{o0}(a0|s0). Entry t >= 1 holds
    log P(s_t|s_{t-1},a_{t-1}) + log P_{o_t}(a_t|s_t)
    + log[(1 - beta_{o_{t-1}}(s_t)) 1{o_t = o_{t-1}} + beta_{o_{t-1}}(s_t) P(o_t|s_t)].
    '''

    if not pols.has_smdp:
        raise DimensionError('SMDP density needs smdp_termination and smdp_master tables')
    validate_policies(pols, mdp)
    _check_trajectory(mdp, tau)

    factors = np.zeros(tau.horizon)
    first = tau.steps[0]
    factors[0] = _safe_log(mdp.initial[first.s, first.o]) + _safe_log(pols.action_policy[first.s, first.o, first.a])
    for t in range(1, tau.horizon):
        prev, step = tau.steps[t - 1], tau.steps[t]
        beta = pols.smdp_termination[prev.o, step.s]
        stay = (1.0 - beta) * float(step.o == prev.o)
        switch = beta * pols.smdp_master[step.s, step.o]
        factors[t] = (_safe_log(mdp.transition[prev.s, prev.a, step.s])
                      + _safe_log(pols.action_policy[step.s, step.o, step.a])
                      + _safe_log(stay + switch))
    return factors


def hitmdp_step_logfactors(mdp, pols, tau):
    ''' Per-step log factors of the HiT-MDP density (entry 0 includes P(s0,o0))'''

    validate_policies(pols, mdp)
    _check_trajectory(mdp, tau)

    s = np.array([step.s for step in tau.steps])
    a = np.array([step.a for step in tau.steps])
    o = np.array([step.o for step in tau.steps])

    factors = _safe_log(pols.action_policy[s, o, a])
    factors[0] += _safe_log(mdp.initial[s[0], o[0]])
    if tau.horizon > 1:
        factors[1:] += _safe_log(mdp.transition[s[:-1], a[:-1], s[1:]])
        factors[1:] += _safe_log(pols.option_policy[s[1:], o[:-1], o[1:]])
    return factors


def _total(factors):
    if np.any(factors <= LOG_ZERO / 2):
        return LOG_ZERO
    return float(np.sum(factors))


def traj_logprob_smdp(mdp, pols, tau):
    ''' Log density of a trajectory under the SMDP option framework'''

    return _total(smdp_step_logfactors(mdp, pols, tau))


def traj_logprob_hitmdp(mdp, pols, tau):
    ''' Log density of a trajectory under the HiT-MDP'''

    return _total(hitmdp_step_logfactors(mdp, pols, tau))


def optimality_loglik(mdp, tau, f_values):
    ''' Log optimality likelihood: sum over steps of r(s_t,a_t) + f_t'''

    _check_trajectory(mdp, tau)
    f_values = np.asarray(f_values, dtype=float)
    if f_values.shape != (tau.horizon,):
        raise DimensionError(f'Expected {tau.horizon} regularizer values, got shape {f_values.shape}')
    if np.any(f_values > 0):
        raise InvalidDistributionError('Regularizer values must be non-positive')
    rewards = np.array([mdp.reward[step.s, step.a] for step in tau.steps])
    return float(np.sum(rewards) + np.sum(f_values))


def mutual_info_regularizer(pols, marginal, s, o_prev, o):
    ''' Clamped pointwise mutual information min(0, log pi^O(o|s,o_prev) - log m(o))'''

    marginal = np.asarray(marginal, dtype=float)
    _check_distribution(marginal, 0, 'option marginal')
    if marginal.shape != (pols.option_policy.shape[1],):
        raise DimensionError(f'Marginal over {marginal.shape} does not match {pols.option_policy.shape[1]} options')
    if marginal[o] <= 0:
        return LOG_ZERO
    prob = pols.option_policy[s, o_prev, o]
    if prob <= 0:
        return LOG_ZERO
    return float(min(0.0, np.log(prob) - np.log(marginal[o])))


def mutual_info_table(option_policy, marginal):
    ''' Clamped pointwise mutual information for every (s, o_prev, o), shape [S,K,K]'''

    log_ratio = _safe_log(option_policy) - _safe_log(marginal)[None, None, :]
    table = np.minimum(0.0, log_ratio)
    return np.maximum(table, LOG_ZERO)


def uniform_policies(n_states, n_options, n_actions):

    return TabularPolicies(np.full((n_states, n_options, n_options), 1.0 / n_options),
                           np.full((n_states, n_options, n_actions), 1.0 / n_actions))


def random_policies(n_states, n_options, n_actions, rng, concentration=1.0, smdp=False):
    ''' Seeded random tabular policies with Dirichlet rows'''

    option_policy = rng.dirichlet(np.full(n_options, concentration), size=(n_states, n_options))
    action_policy = rng.dirichlet(np.full(n_actions, concentration), size=(n_states, n_options))
    termination, master = None, None
    if smdp:
        termination = rng.uniform(size=(n_options, n_states))
        master = rng.dirichlet(np.full(n_options, concentration), size=n_states)
    return TabularPolicies(option_policy, action_policy, termination, master)


def random_mdp(n_states, n_options, n_actions, rng, discount=0.9, concentration=1.0,
               regularizer_mode='zero'):
    ''' Seeded random FiniteHiTMDP with Dirichlet transitions and uniform rewards'''

    transition = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    initial = rng.dirichlet(np.ones(n_states * n_options)).reshape(n_states, n_options)
    return FiniteHiTMDP(n_states, n_options, n_actions, transition, reward, discount, initial,
                        regularizer_mode)


def joint_policy(pols):
    ''' HiT-MDP policy over augmented actions: pi(alpha|e) = pi^O(o|s,o_prev) pi^A(a|s,o), shape [S*K, K*A]'''

    S, K, A = pols.shape
    joint = pols.option_policy[:, :, :, None] * pols.action_policy[:, None, :, :]
    return joint.reshape(S * K, K * A)


def sample_categorical(probs, rng):
    ''' Draw one index per row of probs by inverse-CDF sampling'''

    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)


def sample_trajectories(mdp, pols, horizon, n, rng):
    ''' Ancestral sampling of n trajectories from the HiT-MDP.

    Returns a dict of int arrays s, o_prev, a, o of shape [n, horizon]
    and a float array r of the same shape.
    '''

    validate_policies(pols, mdp)
    S, K, A = mdp.shape
    out = {key: np.zeros((n, horizon), dtype=int) for key in ('s', 'o_prev', 'a', 'o')}
    out['r'] = np.zeros((n, horizon))
    if horizon == 0:
        return out

    flat = sample_categorical(np.broadcast_to(mdp.initial.reshape(-1), (n, S * K)), rng)
    s, o = flat // K, flat % K
    o_prev = np.full(n, NO_OPTION)
    for t in range(horizon):
        if t > 0:
            o = sample_categorical(pols.option_policy[s, o_prev], rng)
        a = sample_categorical(pols.action_policy[s, o], rng)
        out['s'][:, t], out['o_prev'][:, t], out['a'][:, t], out['o'][:, t] = s, o_prev, a, o
        out['r'][:, t] = mdp.reward[s, a]
        s = sample_categorical(mdp.transition[s, a], rng)
        o_prev = o
    return out


def count_trajectory_terms(mdp, horizon):

    S, K, A = mdp.shape
    return (S * K * A) ** horizon


def enumerate_trajectories(mdp, pols, horizon, guard=ENUMERATION_GUARD):
    ''' Yield (Trajectory, probability) for every trajectory of non-zero probability'''

    terms = count_trajectory_terms(mdp, horizon)
    if terms > guard:
        raise EnumerationGuardError(f'Enumerating horizon {horizon} needs {terms} terms (guard {guard})')
    validate_policies(pols, mdp)
    if horizon == 0:
        yield Trajectory([]), 1.0
        return

    S, K, A = mdp.shape

    def extend(prefix, prob, s, o):
        for a in range(A):
            p_a = prob * pols.action_policy[s, o, a]
            if p_a <= 0:
                continue
            o_prev = prefix[-1].o if prefix else NO_OPTION
            steps = prefix + [Step(s, o_prev, a, o, float(mdp.reward[s, a]))]
            if len(steps) == horizon:
                yield Trajectory(steps), p_a
                continue
            for s_next, o_next in itertools.product(range(S), range(K)):
                p_next = p_a * mdp.transition[s, a, s_next] * pols.option_policy[s_next, o, o_next]
                if p_next > 0:
                    yield from extend(steps, p_next, s_next, o_next)

    for s0, o0 in itertools.product(range(S), range(K)):
        if mdp.initial[s0, o0] > 0:
            yield from extend([], mdp.initial[s0, o0], s0, o0)


def option_marginal(pols, weights):
    ''' Option frequency m(o) = sum_{s,o_prev} w(s,o_prev) pi^O(o|s,o_prev)'''

    weights = np.asarray(weights, dtype=float)
    if weights.shape != pols.option_policy.shape[:2]:
        raise DimensionError(f'Weights shape {weights.shape} != {pols.option_policy.shape[:2]}')
    marginal = np.einsum('sp,spo->o', weights, pols.option_policy)
    return marginal / marginal.sum()


def augmented_occupancy(mdp, pols, n_steps=500):
    ''' Cesaro-averaged distribution of the augmented state (s, o_prev) over steps 1..n_steps'''

    validate_policies(pols, mdp)
    # d holds P(s_t, o_t); the augmented state of step t+1 is (s_{t+1}, o_t)
    d = mdp.initial.copy()
    total = np.zeros_like(d)
    for _ in range(n_steps):
        state_action = d[:, :, None] * pols.action_policy
        aug = np.einsum('soa,sat->to', state_action, mdp.transition)
        total += aug
        d = np.einsum('tp,tpo->to', aug, pols.option_policy)
    return total / n_steps


def expected_mutual_info(mdp, pols, occupancy=None):
    ''' Expected clamped regularizer f_bar(s,o) under the posterior over o_prev given (s,o).

    Unvisited (s,o) pairs fall back to a uniform weighting over o_prev.
    '''

    if occupancy is None:
        occupancy = augmented_occupancy(mdp, pols)
    marginal = option_marginal(pols, occupancy)
    table = mutual_info_table(pols.option_policy, marginal)
    weights = occupancy[:, :, None] * pols.option_policy
    norm = weights.sum(axis=1, keepdims=True)
    K = pols.option_policy.shape[1]
    weights = np.where(norm > 0, weights / np.where(norm > 0, norm, 1.0), 1.0 / K)
    return np.einsum('spo,spo->so', weights, table)


def mdp_to_dict(mdp):

    return {'n_states': mdp.n_states, 'n_options': mdp.n_options, 'n_actions': mdp.n_actions,
            'transition': mdp.transition.tolist(), 'reward': mdp.reward.tolist(),
            'discount': mdp.discount, 'initial': mdp.initial.tolist(),
            'regularizer_mode': mdp.regularizer_mode}


def mdp_from_dict(doc):

    return FiniteHiTMDP(int(doc['n_states']), int(doc['n_options']), int(doc['n_actions']),
                        np.array(doc['transition'], dtype=float), np.array(doc['reward'], dtype=float),
                        float(doc['discount']), np.array(doc['initial'], dtype=float),
                        doc.get('regularizer_mode', 'zero'))


def mdp_to_json(mdp, path):

    with open(path, 'w') as file:
        json.dump(mdp_to_dict(mdp), file, indent=1)
    logger.debug(f'Wrote FiniteHiTMDP {mdp.shape} to {path}')


def mdp_from_json(path):

    with open(path, 'r') as file:
        return mdp_from_dict(json.load(file))


def policies_to_dict(pols):

    doc = {'option_policy': pols.option_policy.tolist(), 'action_policy': pols.action_policy.tolist()}
    if pols.smdp_termination is not None:
        doc['smdp_termination'] = pols.smdp_termination.tolist()
    if pols.smdp_master is not None:
        doc['smdp_master'] = pols.smdp_master.tolist()
    return doc


def policies_from_dict(doc):

    return TabularPolicies(np.array(doc['option_policy'], dtype=float),
                           np.array(doc['action_policy'], dtype=float),
                           None if doc.get('smdp_termination') is None else np.array(doc['smdp_termination']),
                           None if doc.get('smdp_master') is None else np.array(doc['smdp_master']))


def policies_to_json(pols, path):

    with open(path, 'w') as file:
        json.dump(policies_to_dict(pols), file, indent=1)


def policies_from_json(path):

    with open(path, 'r') as file:
        return policies_from_dict(json.load(file))
