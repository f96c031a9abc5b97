"""Exact planning on finite MDPs

Policy evaluation, (masked) value iteration, Constrained Policy Iteration (CPI) with
truncated constraint-violation functions, and an enumeration oracle over deterministic
policies used to verify CPI.

"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from cqlearn.errors import InstanceTooLargeError
from cqlearn.mdp import FiniteMdp, Priority, TabularPolicy, Transition, greedy_action, resolve_masks, safe_set

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10**7


def _actions_of(policy) -> np.ndarray:
    if isinstance(policy, TabularPolicy):
        return policy.actions
    return np.asarray(policy, dtype=int)


def evaluate_policy_exact(mdp: FiniteMdp, policy) -> np.ndarray:
    """state values V^pi by a linear solve over non-terminal states

    Parameters
    ----------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
    policy : :class:`~cqlearn.mdp.TabularPolicy` or array_like of int

    Returns
    -------
    values : numpy.ndarray
        V^pi of shape (n_states,), zero on terminal states.
    """
    actions = _actions_of(policy)
    states = np.arange(mdp.n_states)
    live = ~mdp.terminal
    p_pi = mdp.transition[states, actions][np.ix_(live, live)]
    r_pi = mdp.expected_reward()[states, actions][live]
    values = np.zeros(mdp.n_states)
    values[live] = np.linalg.solve(np.eye(p_pi.shape[0]) - mdp.gamma * p_pi, r_pi)
    return values


def evaluate_policy_on(mdp: FiniteMdp, actions, states) -> np.ndarray:
    """V^pi on ``states`` only, which must be closed under the transitions of ``actions``

    Entries of ``actions`` outside ``states`` are ignored; values outside ``states`` are zero.
    """
    actions = np.asarray(actions, dtype=int)
    live = np.flatnonzero(np.isin(np.arange(mdp.n_states), states) & ~mdp.terminal)
    p_pi = mdp.transition[live, actions[live]][:, live]
    r_pi = mdp.expected_reward()[live, actions[live]]
    values = np.zeros(mdp.n_states)
    values[live] = np.linalg.solve(np.eye(len(live)) - mdp.gamma * p_pi, r_pi)
    return values


def initial_value(mdp: FiniteMdp, values) -> float:
    """expected value under the initial state distribution"""
    return float(mdp.initial_state_dist @ np.asarray(values))


def q_from_values(mdp: FiniteMdp, values) -> np.ndarray:
    """one-step lookahead Q(s, a) = r(s, a) + gamma sum_s' P(s'|s, a) V(s'), zero on terminals"""
    q = mdp.expected_reward() + mdp.gamma * mdp.transition @ np.asarray(values, dtype=float)
    q[mdp.terminal] = 0.0
    return q


def value_iteration(mdp: FiniteMdp, masks=None, tol: float = 1e-10, max_iters: int = 100_000):
    """optimal Q of the (optionally action-masked) MDP

    Parameters
    ----------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
    masks : array_like of bool, optional
        allowed actions per state, shape (n_states, n_actions). The max in the backup is taken
        over allowed actions only.
    tol : float
        sup-norm stopping tolerance.
    max_iters : int

    Returns
    -------
    q : numpy.ndarray
        Q values of shape (n_states, n_actions).
    values : numpy.ndarray
        V(s) = max over allowed actions of Q(s, a).
    """
    if masks is None:
        masks = np.ones((mdp.n_states, mdp.n_actions), dtype=bool)
    masks = np.asarray(masks, dtype=bool)
    values = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q = q_from_values(mdp, values)
        new_values = np.where(masks, q, -np.inf).max(axis=1)
        new_values[mdp.terminal] = 0.0
        delta = np.max(np.abs(new_values - values))
        values = new_values
        if delta < tol:
            break
    else:
        logger.warning("value iteration stopped after %d sweeps without reaching tol=%g", max_iters, tol)
    return q_from_values(mdp, values), values


def base_safe_sets(mdp: FiniteMdp, constraints, fallback_action: int = 0) -> np.ndarray:
    """resolved single-step safe sets S_C(s) for every state, shape (n_states, n_actions)"""
    single = [c for c in constraints if not c.is_multi_step]
    return np.array([safe_set(s, single, mdp.n_actions, fallback_action=fallback_action) for s in range(mdp.n_states)])


def expected_immediate_signal(mdp: FiniteMdp, constraint) -> np.ndarray:
    """E[j_t | s, a] of a multi-step constraint, shape (n_states, n_actions)"""
    signal = np.zeros((mdp.n_states, mdp.n_actions))
    for s, a, s_next in zip(*np.nonzero(mdp.transition)):
        if mdp.terminal[s]:
            continue
        reward = mdp.reward[s, a, s_next] if mdp.reward.ndim == 3 else mdp.reward[s, a]
        tr = Transition(int(s), int(a), float(reward), int(s_next), bool(mdp.terminal[s_next]))
        signal[s, a] += mdp.transition[s, a, s_next] * constraint.immediate_signal(tr)
    return signal


def truncated_violations(mdp: FiniteMdp, policy, immediate, horizon: int) -> np.ndarray:
    """truncated constraint values J^pi_h(s|a) for h = 1..horizon

    J_1(s|a) = j(s, a) and J_h(s|a) = j(s, a) + sum_s' P(s'|s, a) J_{h-1}(s'|pi(s')), where
    terminal successors contribute nothing. With j(s, a) = 1[a not in S_C(s)] this counts the
    constraint violations within the horizon when taking a and then following pi.

    Returns
    -------
    j_values : numpy.ndarray
        array of shape (horizon, n_states, n_actions)
    """
    actions = _actions_of(policy)
    immediate = np.where(mdp.terminal[:, None], 0.0, np.asarray(immediate, dtype=float))
    states = np.arange(mdp.n_states)
    j_values = np.zeros((horizon, mdp.n_states, mdp.n_actions))
    j_values[0] = immediate
    for h in range(1, horizon):
        follow = np.where(mdp.terminal, 0.0, j_values[h - 1][states, actions])
        j_values[h] = immediate + mdp.transition @ follow
    return j_values


@dataclass
class CpiState:
    """one CPI iterate: policy pi_k, V_C^{pi_k}, J^{pi_k}_H(s|a) and S^{pi_k}_C(s)"""

    policy: TabularPolicy
    values: np.ndarray
    violations: np.ndarray
    safe_sets: np.ndarray


@dataclass
class CpiResult:
    """outcome of :func:`constrained_policy_iteration`; unpacks as (policy, values)"""

    policy: TabularPolicy
    values: np.ndarray
    converged: bool
    iterates: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.policy, self.values))

    @property
    def n_iterations(self) -> int:
        return len(self.iterates)


def policy_safe_sets(mdp: FiniteMdp, policy, base, multi_step, horizon: int, fallback_action: int = 0):
    """policy-dependent safe sets S^pi_C(s) = {a | J^pi_H(s|a) = 0}, intersected with multi-step masks

    Returns
    -------
    safe_sets : numpy.ndarray
        boolean array (n_states, n_actions), never empty per state.
    violations : numpy.ndarray
        J^pi_h(s|a) of the violation indicator, shape (horizon, n_states, n_actions).
    """
    violations = truncated_violations(mdp, policy, ~base, horizon)
    masks = [violations[-1] <= 0.0]
    priorities = [Priority.SAFETY]
    for constraint, signal in multi_step:
        j_values = truncated_violations(mdp, policy, signal, constraint.horizon)
        masks.append(np.array([constraint.mask(j_values[-1][s]) for s in range(mdp.n_states)]))
        priorities.append(constraint.priority)
    safe_sets = np.array(
        [
            resolve_masks([m[s] for m in masks], priorities, mdp.n_actions, fallback_action)
            for s in range(mdp.n_states)
        ]
    )
    return safe_sets, violations


def constrained_policy_iteration(
    mdp: FiniteMdp, constraints=(), horizon: int = 1, max_iters: int = 1000, fallback_action: int = 0
) -> CpiResult:
    """Constrained Policy Iteration

    Alternates exact evaluation of V_C^{pi_k} with the improvement step
    pi_{k+1}(s) = argmax over S^{pi_k}_C(s) of r(s, a) + gamma sum_s' P(s'|s, a) V_C^{pi_k}(s').
    The current action is kept whenever it is among the maximizers, so the iteration stops at a
    fixed point.

    Parameters
    ----------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
        single-step constraints define S_C(s); tabular multi-step constraints are evaluated exactly
        under the current policy.
    horizon : int
        H of the truncated violation function.
    max_iters : int
        iteration budget; on exhaustion the last iterate is returned with ``converged=False``.
    fallback_action : int

    Returns
    -------
    result : :class:`CpiResult`
    """
    base = base_safe_sets(mdp, constraints, fallback_action)
    multi_step = [(c, expected_immediate_signal(mdp, c)) for c in constraints if c.is_multi_step]
    reward = mdp.expected_reward()
    policy = TabularPolicy([greedy_action(reward[s], base[s]) for s in range(mdp.n_states)])
    iterates = []
    for _ in range(max_iters):
        values = evaluate_policy_exact(mdp, policy)
        safe_sets, violations = policy_safe_sets(mdp, policy, base, multi_step, horizon, fallback_action)
        iterates.append(CpiState(policy, values, violations, safe_sets))
        q = q_from_values(mdp, values)
        actions = policy.actions.copy()
        for s in range(mdp.n_states):
            best = greedy_action(q[s], safe_sets[s])
            current = actions[s]
            if safe_sets[s, current] and q[s, current] >= q[s, best] - 1e-12:
                continue
            actions[s] = best
        if np.array_equal(actions, policy.actions):
            return CpiResult(policy, values, True, iterates)
        policy = TabularPolicy(actions)
    logger.warning("constrained policy iteration did not converge within %d iterations", max_iters)
    return CpiResult(policy, evaluate_policy_exact(mdp, policy), False, iterates)


def policy_iteration(mdp: FiniteMdp, max_iters: int = 1000) -> CpiResult:
    """standard policy iteration, i.e. CPI without constraints"""
    return constrained_policy_iteration(mdp, (), max_iters=max_iters)


def _evaluate_batch(mdp: FiniteMdp, policies: np.ndarray) -> np.ndarray:
    live = ~mdp.terminal
    states = np.arange(mdp.n_states)
    p_pi = mdp.transition[states[None, :], policies][:, live][:, :, live]
    r_pi = mdp.expected_reward()[states[None, :], policies][:, live]
    eye = np.eye(p_pi.shape[1])[None]
    values = np.zeros(policies.shape)
    values[:, live] = np.linalg.solve(eye - mdp.gamma * p_pi, r_pi[..., None])[..., 0]
    return values


def brute_force_constrained_optimum(
    mdp: FiniteMdp, constraints=(), limit: int = BRUTE_FORCE_LIMIT, fallback_action: int = 0, chunk: int = 4096
):
    """exhaustive search over deterministic policies whose actions lie in the safe sets

    Every policy drawn from the product of the resolved single-step safe sets is evaluated exactly;
    policies violating a multi-step constraint under their own J values are discarded. The policy
    with the largest total state value is returned, which is the uniformly optimal one.

    Parameters
    ----------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
    limit : int
        refuse instances with n_actions ** n_states above this bound.

    Returns
    -------
    policy : :class:`~cqlearn.mdp.TabularPolicy`
    values : numpy.ndarray

    Raises
    ------
    InstanceTooLargeError
        if the instance exceeds ``limit``.
    """
    if mdp.n_actions**mdp.n_states > limit:
        raise InstanceTooLargeError(f"{mdp.n_actions}^{mdp.n_states} policies exceed the enumeration limit {limit}")
    base = base_safe_sets(mdp, constraints, fallback_action)
    multi_step = [(c, expected_immediate_signal(mdp, c)) for c in constraints if c.is_multi_step]
    # actions at terminal states do not affect values
    choices = [np.flatnonzero(base[s])[:1] if mdp.terminal[s] else np.flatnonzero(base[s]) for s in range(mdp.n_states)]
    best_policy, best_values, best_score = None, None, -np.inf
    fallback_policy, fallback_values, fallback_score = None, None, -np.inf
    product = itertools.product(*choices)
    while True:
        block = np.array(list(itertools.islice(product, chunk)), dtype=int)
        if block.size == 0:
            break
        values = _evaluate_batch(mdp, block)
        scores = values.sum(axis=1)
        for i in np.argsort(-scores, kind="stable"):
            if scores[i] <= best_score:
                break
            if scores[i] > fallback_score:
                fallback_policy, fallback_values, fallback_score = block[i], values[i], scores[i]
            if _satisfies_multi_step(mdp, block[i], multi_step):
                best_policy, best_values, best_score = block[i], values[i], scores[i]
                break
    if best_policy is None:
        logger.warning("no deterministic policy satisfies the multi-step constraints; returning the masked optimum")
        best_policy, best_values = fallback_policy, fallback_values
    return TabularPolicy(best_policy), best_values


def _satisfies_multi_step(mdp: FiniteMdp, actions, multi_step) -> bool:
    states = np.arange(mdp.n_states)
    for constraint, signal in multi_step:
        j_values = truncated_violations(mdp, actions, signal, constraint.horizon)[-1]
        mask = np.array([constraint.mask(j_values[s])[actions[s]] for s in states])
        if not mask[~mdp.terminal].all():
            return False
    return True


def rollout_greedy(mdp: FiniteMdp, policy, state: int | None = None, max_steps: int = 10_000):
    """follow ``policy`` along the most likely successor of every step

    Intended for deterministic MDPs, where it returns the exact return of the policy.

    Returns
    -------
    total : float
        discounted return collected until a terminal state (or ``max_steps``).
    final_state : int
        the state the rollout stopped in.
    """
    if state is None:
        state = int(np.argmax(mdp.initial_state_dist))
    total, discount = 0.0, 1.0
    for _ in range(max_steps):
        if mdp.terminal[state]:
            break
        action = policy(state) if callable(policy) else int(np.asarray(policy)[state])
        next_state = int(np.argmax(mdp.transition[state, action]))
        reward = mdp.reward[state, action, next_state] if mdp.reward.ndim == 3 else mdp.reward[state, action]
        total += discount * float(reward)
        discount *= mdp.gamma
        state = next_state
    return total, state
