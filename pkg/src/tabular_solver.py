"""

Tabular solver

Exact soft option policy evaluation, soft policy improvement and soft option
policy iteration for finite HiT-MDPs, plus exact ELBO computation.

One evaluation sweep applies the action backup and then the option backup,
each as a Jacobi update over the whole table:

  Q_A[s,o,a] = r(s,a) + gamma * sum_s' P(s'|s,a) V_O(s',o)
  V_O(s',o)  = sum_o' pi^O(o'|s',o) Q_O[s',o'] + alpha_o * H[pi^O(.|s',o)]
  Q_O[s,o]   = f_bar(s,o) + sum_a pi^A(a|s,o) Q_A[s,o,a] + alpha_a * H[pi^A(.|s,o)]

"""

import json
import logging
import itertools
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import entr, logsumexp, softmax

from lab_settings import read_lab_settings
from lab_errors import ConfigError, ConvergenceError, DimensionError, EnumerationGuardError
from hitmdp_core import (TabularPolicies, validate_policies, expected_mutual_info, augmented_occupancy,
                         option_marginal, mutual_info_table, enumerate_trajectories, ENUMERATION_GUARD)

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

MAX_SWEEPS = 100000
MAX_ROUNDS = 1000


@dataclass(frozen=True)
class TemperaturePair:
    alpha_a: float = 1.0
    alpha_o: float = 1.0

    def __post_init__(self):
        if not (self.alpha_a > 0 and self.alpha_o > 0):
            raise ConfigError(f'Temperatures must be positive, got ({self.alpha_a}, {self.alpha_o})')


@dataclass
class SoftQTables:
    """Q_O[s,o] and Q_A[s,o,a]; residuals holds the per-sweep sup-norm change"""

    q_option: np.ndarray
    q_action: np.ndarray
    residuals: List[float] = field(default_factory=list)

    @property
    def sweeps(self):
        return len(self.residuals)


@dataclass
class PolicyIterationResult:
    policies: TabularPolicies
    q: SoftQTables
    elbo_trace: List[float]
    policy_changes: List[float]
    sweeps: List[int]

    def __iter__(self):
        return iter((self.policies, self.q, self.elbo_trace))


def policy_entropies(pols):
    ''' Entropies H[pi^A(.|s,o)] and H[pi^O(.|s,o_prev)], both of shape [S,K]'''

    return entr(pols.action_policy).sum(axis=2), entr(pols.option_policy).sum(axis=2)


def expected_regularizer(mdp, pols):
    ''' f_bar(s,o): zero, or the expected clamped mutual information'''

    if mdp.regularizer_mode == 'mutual_info':
        return expected_mutual_info(mdp, pols)
    return np.zeros((mdp.n_states, mdp.n_options))


def action_backup(mdp, pols, temps, q_option, h_option):
    ''' Q_A from the current Q_O'''

    v_option = np.einsum('spo,so->sp', pols.option_policy, q_option) + temps.alpha_o * h_option
    return mdp.reward[:, None, :] + mdp.discount * np.einsum('sat,to->soa', mdp.transition, v_option)


def option_backup(pols, temps, q_action, f_bar, h_action):
    ''' Q_O from the current Q_A'''

    return f_bar + np.einsum('soa,soa->so', pols.action_policy, q_action) + temps.alpha_a * h_action


def soft_policy_evaluation(mdp, pols, temps, tol=1e-9, max_sweeps=MAX_SWEEPS, init=None):
    """
    Evaluate the soft Q tables of a fixed pair of option and action policies.

    Parameters:
    - mdp (FiniteHiTMDP): model to evaluate on.
    - pols (TabularPolicies): policies to evaluate.
    - temps (TemperaturePair): entropy multipliers.
    - tol (float): stop when the sup-norm change of a sweep falls below tol.
    - max_sweeps (int): iteration cap.
    - init (SoftQTables, optional): warm start.

    Returns:
    - SoftQTables at the fixed point, with per-sweep residuals.

    Raises:
    - ConvergenceError if the cap is hit before the change drops below tol.
    """

    if tol <= 0:
        raise ConfigError(f'Evaluation tolerance must be positive, got {tol}')
    validate_policies(pols, mdp)

    h_action, h_option = policy_entropies(pols)
    f_bar = expected_regularizer(mdp, pols)

    if init is None:
        q_option = np.zeros((mdp.n_states, mdp.n_options))
        q_action = np.zeros((mdp.n_states, mdp.n_options, mdp.n_actions))
    else:
        q_option, q_action = init.q_option.copy(), init.q_action.copy()

    residuals = []
    for sweep in range(max_sweeps):
        new_action = action_backup(mdp, pols, temps, q_option, h_option)
        new_option = option_backup(pols, temps, new_action, f_bar, h_action)
        delta = max(np.max(np.abs(new_action - q_action)), np.max(np.abs(new_option - q_option)))
        residuals.append(float(delta))
        q_option, q_action = new_option, new_action
        if delta < tol:
            logger.debug(f'Soft policy evaluation converged after {sweep + 1} sweeps (change {delta:.3g})')
            return SoftQTables(q_option, q_action, residuals)

    raise ConvergenceError(f'Soft policy evaluation did not converge in {max_sweeps} sweeps '
                           f'(last change {residuals[-1]:.3g}, discount {mdp.discount})')


def soft_policy_improvement(q, temps):
    ''' Boltzmann policies of the soft Q tables; pi^O does not depend on o_prev'''

    if not (np.all(np.isfinite(q.q_option)) and np.all(np.isfinite(q.q_action))):
        raise ConvergenceError('Cannot improve on non-finite Q tables')
    S, K = q.q_option.shape
    action_policy = softmax(q.q_action / temps.alpha_a, axis=2)
    option_rows = softmax(q.q_option / temps.alpha_o, axis=1)
    option_policy = np.broadcast_to(option_rows[:, None, :], (S, K, K)).copy()
    return TabularPolicies(option_policy, action_policy)


def policy_distance(p, q):

    return float(max(np.max(np.abs(p.option_policy - q.option_policy)),
                     np.max(np.abs(p.action_policy - q.action_policy))))


def soft_option_policy_iteration(mdp, init, temps, tol=1e-9, max_rounds=MAX_ROUNDS, eval_tol=None,
                                 max_sweeps=MAX_SWEEPS):
    """
    Alternate soft evaluation and soft improvement until the policies settle.

    The trace records sum(initial * Q_O) for each improved policy: the
    infinite-horizon discounted soft value, not the finite-horizon ELBO.

    Returns:
    - PolicyIterationResult, which unpacks as (policies, q, elbo_trace).
    """

    validate_policies(init, mdp)
    if eval_tol is None:
        # policy noise scales with the evaluation error times 1/(1-gamma)
        eval_tol = max(1e-12, tol * (1.0 - mdp.discount) * 1e-2)

    pols = init
    q = soft_policy_evaluation(mdp, pols, temps, eval_tol, max_sweeps)
    trace, changes, sweeps = [], [], []
    for round_id in range(max_rounds):
        new_pols = soft_policy_improvement(q, temps)
        change = policy_distance(new_pols, pols)
        q = soft_policy_evaluation(mdp, new_pols, temps, eval_tol, max_sweeps, init=q)
        pols = new_pols
        trace.append(float(np.sum(mdp.initial * q.q_option)))
        changes.append(change)
        sweeps.append(q.sweeps)
        logger.debug(f'Improvement {round_id + 1}: elbo {trace[-1]:.10g}, policy change {change:.3g}')
        if change < tol:
            logger.info(f'Soft option policy iteration converged after {round_id + 1} improvements')
            return PolicyIterationResult(pols, q, trace, changes, sweeps)

    raise ConvergenceError(f'Soft option policy iteration did not settle in {max_rounds} rounds '
                           f'(last policy change {changes[-1]:.3g})')


def soft_value_iteration(mdp, temps, tol=1e-10, max_sweeps=MAX_SWEEPS):
    ''' Soft-optimal Q tables by direct log-sum-exp backups (regularizer must be zero)'''

    if mdp.regularizer_mode != 'zero':
        raise ConfigError('Soft value iteration supports the zero regularizer only')
    q_option = np.zeros((mdp.n_states, mdp.n_options))
    q_action = np.zeros((mdp.n_states, mdp.n_options, mdp.n_actions))
    residuals = []
    for _ in range(max_sweeps):
        v_next = temps.alpha_o * logsumexp(q_option / temps.alpha_o, axis=1)
        new_action = (mdp.reward[:, None, :]
                      + mdp.discount * np.einsum('sat,t->sa', mdp.transition, v_next)[:, None, :])
        new_action = np.broadcast_to(new_action, q_action.shape).copy()
        new_option = temps.alpha_a * logsumexp(new_action / temps.alpha_a, axis=2)
        delta = max(np.max(np.abs(new_action - q_action)), np.max(np.abs(new_option - q_option)))
        residuals.append(float(delta))
        q_option, q_action = new_option, new_action
        if delta < tol:
            return SoftQTables(q_option, q_action, residuals)

    raise ConvergenceError(f'Soft value iteration did not converge in {max_sweeps} sweeps')


def _check_horizon(mdp, horizon, method, guard):

    if horizon < 0:
        raise ConfigError(f'Horizon must be non-negative, got {horizon}')
    if method not in ('forward', 'enumerate'):
        raise ConfigError(f'Unknown ELBO method: {method}')
    S, K, A = mdp.shape
    terms = (S * K * A) ** horizon
    if method == 'enumerate' and terms > guard:
        raise EnumerationGuardError(f'ELBO enumeration over horizon {horizon} needs {terms} terms (guard {guard})')


def elbo_exact(mdp, pols, horizon, temps=None, method='forward', guard=ENUMERATION_GUARD):
    """
    Exact ELBO of a policy.

    Parameters:
    - mdp (FiniteHiTMDP): the model.
    - pols (TabularPolicies or ndarray): factored policies, or a joint table
      over augmented actions given augmented states (see elbo_exact_joint).
    - horizon (int or None): None gives the discounted infinite-horizon ELBO
      sum P(s0,o0) Q_O[s0,o0]; an integer gives the undiscounted
      finite-horizon ELBO E[sum_t r + f + alpha_a H[pi^A] + alpha_o H[pi^O]].
    - temps (TemperaturePair): entropy multipliers, default (1, 1).
    - method (str): 'forward' propagates state-option marginals,
      'enumerate' sums over every trajectory.
    """

    if isinstance(pols, np.ndarray):
        return elbo_exact_joint(mdp, pols, horizon, method, guard)
    if temps is None:
        temps = TemperaturePair()
    validate_policies(pols, mdp)
    if horizon is None:
        q = soft_policy_evaluation(mdp, pols, temps, tol=1e-12)
        return float(np.sum(mdp.initial * q.q_option))
    _check_horizon(mdp, horizon, method, guard)
    if horizon == 0:
        return 0.0

    h_action, h_option = policy_entropies(pols)
    if mdp.regularizer_mode == 'mutual_info':
        occupancy = augmented_occupancy(mdp, pols)
        f_first = expected_mutual_info(mdp, pols, occupancy)
        mi = mutual_info_table(pols.option_policy, option_marginal(pols, occupancy))
    else:
        f_first = np.zeros((mdp.n_states, mdp.n_options))
        mi = np.zeros_like(pols.option_policy)

    step_value = np.einsum('soa,sa->so', pols.action_policy, mdp.reward) + temps.alpha_a * h_action
    switch_value = temps.alpha_o * h_option + np.einsum('spo,spo->sp', pols.option_policy, mi)

    if method == 'enumerate':
        total = 0.0
        for tau, prob in enumerate_trajectories(mdp, pols, horizon, guard):
            value = f_first[tau.steps[0].s, tau.steps[0].o]
            for t, step in enumerate(tau.steps):
                value += step_value[step.s, step.o]
                if t > 0:
                    value += temps.alpha_o * h_option[step.s, step.o_prev] + mi[step.s, step.o_prev, step.o]
            total += prob * value
        return float(total)

    # d is P(s_t, o_t); aug is P(s_t, o_{t-1})
    d = mdp.initial
    total = float(np.sum(d * f_first))
    for t in range(horizon):
        if t > 0:
            total += float(np.sum(aug * switch_value))
            d = np.einsum('sp,spo->so', aug, pols.option_policy)
        total += float(np.sum(d * step_value))
        aug = np.einsum('soa,sat->to', d[:, :, None] * pols.action_policy, mdp.transition)
    return total


def elbo_exact_joint(mdp, joint, horizon, method='forward', guard=ENUMERATION_GUARD):
    """
    Finite-horizon ELBO of a joint policy on the augmented process.

    The initial table is read as P(s0, o_prev) over augmented states, every
    step draws alpha = (a, o) from joint[e], and the entropy bonus is the
    unit-temperature entropy of the joint row. Used for homomorphism checks,
    where policies need not factor.
    """

    S, K, A = mdp.shape
    joint = np.asarray(joint, dtype=float)
    if joint.shape != (S * K, K * A):
        raise DimensionError(f'Joint policy shape {joint.shape} != {(S * K, K * A)}')
    if mdp.regularizer_mode != 'zero':
        raise ConfigError('Joint-policy ELBO supports the zero regularizer only')
    if horizon is None:
        raise ConfigError('Joint-policy ELBO needs a finite horizon')
    _check_horizon(mdp, horizon, method, guard)
    if horizon == 0:
        return 0.0

    pi = joint.reshape(S, K, K, A)
    step_value = np.einsum('spoa,sa->sp', pi, mdp.reward) + entr(joint).sum(axis=1).reshape(S, K)

    if method == 'enumerate':
        return float(_enumerate_joint(mdp, pi, step_value, horizon))

    d = mdp.initial
    total = 0.0
    for _ in range(horizon):
        total += float(np.sum(d * step_value))
        d = np.einsum('sp,spoa,sat->to', d, pi, mdp.transition)
    return total


def _enumerate_joint(mdp, pi, step_value, horizon):

    S, K, A = mdp.shape
    total = 0.0

    def walk(prob, s, p, depth):
        nonlocal total
        total += prob * step_value[s, p]
        if depth + 1 == horizon:
            return
        for o, a in itertools.product(range(K), range(A)):
            p_alpha = prob * pi[s, p, o, a]
            if p_alpha <= 0:
                continue
            for s_next in np.nonzero(mdp.transition[s, a])[0]:
                walk(p_alpha * mdp.transition[s, a, s_next], s_next, o, depth + 1)

    for s0, p0 in itertools.product(range(S), range(K)):
        if mdp.initial[s0, p0] > 0:
            walk(mdp.initial[s0, p0], s0, p0, 0)
    return total


def solution_to_dict(pols, q, trace):

    return {'q_option': q.q_option.tolist(), 'q_action': q.q_action.tolist(),
            'elbo_trace': [float(x) for x in trace],
            'option_policy': pols.option_policy.tolist(), 'action_policy': pols.action_policy.tolist()}


def export_solution(path, pols, q, trace):
    ''' Write solver results to JSON'''

    with open(path, 'w') as file:
        json.dump(solution_to_dict(pols, q, trace), file, indent=1)
    logger.info(f'Wrote tabular solution to {path}')
