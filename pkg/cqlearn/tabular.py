"""Tabular learning rules

Q-learning, Constrained Q-learning and truncated constraint-value (J) learning, plus the
episodic training loop used by the Tree-MDP experiments.

"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from cqlearn.errors import ConfigError
from cqlearn.mdp import (
    ConstraintValueSource,
    FiniteMdp,
    extract_policy_spe,
    greedy_action,
    safe_set,
)
from cqlearn.planning import constrained_policy_iteration, evaluate_policy_on, initial_value, value_iteration

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["seed", "algorithm", "episode", "samples", "greedy_return", "is_optimal"]


class QTable:
    """action values Q(s, a) with learning rate alpha

    Parameters
    ----------
    n_states, n_actions : int
    alpha : float
        learning rate in [0, 1].
    init : float or array_like
        initial values, broadcast to (n_states, n_actions).
    """

    def __init__(self, n_states: int, n_actions: int, alpha: float = 0.1, init=0.0):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        self.alpha = float(alpha)
        self.values = np.broadcast_to(np.asarray(init, dtype=float), (n_states, n_actions)).copy()

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "QTable":
        return QTable(self.n_states, self.n_actions, self.alpha, self.values)


class JTable:
    """truncated constraint values J_h(s, a) for h = 1..H

    ``values[h - 1]`` holds J_h. ``n_updates`` counts applied transitions and drives the warm-up
    rule of :class:`JTableSource`.
    """

    def __init__(self, n_states: int, n_actions: int, horizon: int, alpha: float = 0.1):
        if horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        self.alpha = float(alpha)
        self.values = np.zeros((horizon, n_states, n_actions))
        self.n_updates = 0

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    def at(self, h: int) -> np.ndarray:
        """J_h as an (n_states, n_actions) table"""
        return self.values[h - 1]


class JTableSource(ConstraintValueSource):
    """serves J_H of multi-step constraints from JTables keyed by constraint name

    Parameters
    ----------
    tables : dict of str to :class:`JTable`
    warmup : int
        number of J updates before the constraint is enforced.
    """

    def __init__(self, tables: dict, warmup: int = 0):
        self.tables = tables
        self.warmup = warmup

    def _table(self, constraint) -> JTable:
        try:
            return self.tables[constraint.name]
        except KeyError:
            raise ConfigError(f"no JTable for constraint {constraint.name!r}") from None

    def values(self, constraint, state):
        table = self._table(constraint)
        return table.at(min(constraint.horizon, table.horizon))[state]

    def ready(self, constraint):
        return self._table(constraint).n_updates >= self.warmup


def _as_source(j_tables, warmup: int = 0):
    if j_tables is None or isinstance(j_tables, ConstraintValueSource):
        return j_tables
    return JTableSource(j_tables, warmup)


def q_learning_step(q: QTable, transition, gamma: float) -> QTable:
    """q(s,a) <- (1 - alpha) q(s,a) + alpha (r + gamma max_a' q(s',a')), no bootstrap on terminal s'"""
    s, a, r, s_next, terminal = transition[:5]
    bootstrap = 0.0 if terminal else gamma * np.max(q.values[s_next])
    q.values[s, a] = (1.0 - q.alpha) * q.values[s, a] + q.alpha * (r + bootstrap)
    return q


def constrained_q_step(
    q: QTable, transition, gamma: float, constraints=(), j_tables=None, fallback_action: int = 0
) -> QTable:
    """Constrained Q-learning update

    The bootstrap max is restricted to the resolved safe set S_C(s') of the successor state.

    Parameters
    ----------
    q : :class:`QTable`
    transition : :class:`~cqlearn.mdp.Transition` or tuple
        (s, a, r, s', terminal).
    gamma : float
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
    j_tables : dict of str to :class:`JTable` or :class:`~cqlearn.mdp.ConstraintValueSource`, optional
        J values for multi-step constraints.
    fallback_action : int

    Returns
    -------
    q : :class:`QTable`
        the same table, updated in place.
    """
    s, a, r, s_next, terminal = transition[:5]
    if terminal:
        bootstrap = 0.0
    else:
        mask = safe_set(s_next, constraints, q.n_actions, _as_source(j_tables), fallback_action)
        bootstrap = gamma * np.max(q.values[s_next][mask])
    q.values[s, a] = (1.0 - q.alpha) * q.values[s, a] + q.alpha * (r + bootstrap)
    return q


def j_step(j: JTable, transition, j_t: float, q: QTable, constraints=(), j_tables=None, fallback_action: int = 0):
    """truncated constraint-value update for all horizons from one transition

    J_1 <- (1 - alpha_J) J_1 + alpha_J j_t and
    J_h <- (1 - alpha_J) J_h + alpha_J (j_t + J_{h-1}(s', a')) with a' the constrained-greedy
    action of ``q`` at s'. Terminal successors contribute only j_t.
    """
    s, a, _, s_next, terminal = transition[:5]
    targets = np.full(j.horizon, float(j_t))
    if not terminal:
        mask = safe_set(s_next, constraints, q.n_actions, _as_source(j_tables), fallback_action)
        a_next = greedy_action(q.values[s_next], mask)
        targets[1:] += j.values[:-1, s_next, a_next]
    j.values[:, s, a] = (1.0 - j.alpha) * j.values[:, s, a] + j.alpha * targets
    j.n_updates += 1
    return j


class Algorithm(Enum):
    Q_LEARNING = "q_learning"
    CONSTRAINED_Q = "constrained_q"
    REWARD_SHAPED = "reward_shaped"


@dataclass
class TrainingSchedule:
    """hyperparameters of :func:`run_tabular_training`

    ``penalty`` defaults to 10 x the maximal achievable return of the MDP. ``exploration`` is
    ``"full"`` (random actions from the whole action set) or ``"safe"`` (random actions of
    Constrained Q-learning from S_C(s); the baselines know no safe set while acting).
    """

    max_episodes: int = 5000
    epsilon: float = 0.1
    alpha: float = 0.1
    alpha_j: float = 0.1
    patience: int = 50
    max_episode_steps: int = 200
    q_init: float | np.ndarray = 0.0
    penalty: float | None = None
    exploration: str = "full"
    warmup: int = 0

    def __post_init__(self):
        if self.exploration not in {"full", "safe"}:
            raise ConfigError(f"unknown exploration mode {self.exploration!r}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class TabularTrainingResult:
    algorithm: Algorithm
    q: QTable
    policy: object
    curve: pd.DataFrame
    converged: bool
    converged_episode: int | None = None
    converged_samples: int | None = None
    j_tables: dict = field(default_factory=dict)


def max_achievable_return(mdp: FiniteMdp) -> float:
    """optimal unconstrained value of the initial distribution"""
    _, values = value_iteration(mdp)
    return initial_value(mdp, values)


def greedy_initial_value(mdp: FiniteMdp, q: QTable, constraints=(), evaluator=None) -> float:
    """initial value of the Safe Policy Extraction of ``q``

    Actions are extracted and evaluated only on the states the policy reaches from the initial
    distribution.
    """
    actions = np.zeros(mdp.n_states, dtype=int)
    reached = np.zeros(mdp.n_states, dtype=bool)
    frontier = [int(s) for s in np.flatnonzero(mdp.initial_state_dist)]
    reached[frontier] = True
    while frontier:
        s = frontier.pop()
        if mdp.terminal[s]:
            continue
        actions[s] = greedy_action(q.values[s], safe_set(s, constraints, mdp.n_actions, evaluator))
        for succ in np.flatnonzero(mdp.transition[s, actions[s]]):
            if not reached[succ]:
                reached[succ] = True
                frontier.append(int(succ))
    return initial_value(mdp, evaluate_policy_on(mdp, actions, np.flatnonzero(reached)))


def violation_count(transition, constraints) -> int:
    """number of single-step constraints violated by (s, a) of ``transition``"""
    s, a = transition[0], transition[1]
    count = 0
    for c in constraints:
        if c.is_multi_step or a in c.exempt_actions:
            continue
        count += int(not c.satisfied(c.signal(s, a)))
    return count


def run_tabular_training(
    mdp: FiniteMdp,
    algorithm: Algorithm,
    schedule: TrainingSchedule | None = None,
    constraints=(),
    rng=None,
    seed: int | None = None,
    optimal_value: float | None = None,
) -> TabularTrainingResult:
    """episodic epsilon-greedy training with a convergence detector

    The greedy policy is evaluated exactly before the first episode and after every episode:
    constrained-greedy for Constrained Q-learning, Safe Policy Extraction for the baselines.
    Training converges at the first evaluation index that starts a run of ``schedule.patience``
    consecutive optimal evaluations.

    Parameters
    ----------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
    algorithm : :class:`Algorithm`
    schedule : :class:`TrainingSchedule`
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
    rng : numpy.random.Generator or int, optional
    seed : int, optional
        label written to the learning curve; defaults to ``rng`` when that is an int.
    optimal_value : float, optional
        constrained optimum of the initial distribution; computed by CPI when omitted.

    Returns
    -------
    result : :class:`TabularTrainingResult`
    """
    schedule = schedule or TrainingSchedule()
    algorithm = Algorithm(algorithm)
    if seed is None and isinstance(rng, (int, np.integer)):
        seed = int(rng)
    rng = np.random.default_rng(rng)
    constraints = list(constraints)
    if optimal_value is None:
        optimal_value = initial_value(mdp, constrained_policy_iteration(mdp, constraints).values)
    penalty = schedule.penalty
    if penalty is None:
        penalty = 10.0 * max(abs(max_achievable_return(mdp)), 1.0)

    q = QTable(mdp.n_states, mdp.n_actions, schedule.alpha, schedule.q_init)
    j_tables = {
        c.name: JTable(mdp.n_states, mdp.n_actions, c.horizon, schedule.alpha_j) for c in constraints if c.is_multi_step
    }
    evaluator = JTableSource(j_tables, schedule.warmup) if j_tables else None
    constrained = algorithm is Algorithm.CONSTRAINED_Q
    behaviour_constraints = constraints if constrained else ()

    rows = []
    samples = 0
    streak_start = None
    converged_episode = converged_samples = None
    for episode in range(schedule.max_episodes + 1):
        value = greedy_initial_value(mdp, q, constraints, evaluator)
        is_optimal = bool(abs(value - optimal_value) <= 1e-9)
        rows.append((seed, algorithm.value, episode, samples, value, is_optimal))
        if is_optimal:
            if streak_start is None:
                streak_start = (episode, samples)
            if episode - streak_start[0] + 1 >= schedule.patience:
                converged_episode, converged_samples = streak_start
                break
        else:
            streak_start = None
        if episode == schedule.max_episodes:
            break

        state = mdp.sample_initial_state(rng)
        for _ in range(schedule.max_episode_steps):
            if mdp.terminal[state]:
                break
            greedy_mask = safe_set(state, behaviour_constraints, mdp.n_actions, evaluator)
            if rng.random() < schedule.epsilon:
                allowed = np.flatnonzero(greedy_mask) if schedule.exploration == "safe" else np.arange(mdp.n_actions)
                action = int(allowed[rng.integers(len(allowed))])
            else:
                action = greedy_action(q.values[state], greedy_mask)
            transition = mdp.step(state, action, rng)
            samples += 1
            for c in constraints:
                if c.is_multi_step:
                    j_step(j_tables[c.name], transition, c.immediate_signal(transition), q, constraints, evaluator)
            if constrained:
                constrained_q_step(q, transition, mdp.gamma, constraints, evaluator)
            elif algorithm is Algorithm.REWARD_SHAPED:
                shaped = transition.reward - penalty * violation_count(transition, constraints)
                q_learning_step(q, transition._replace(reward=shaped), mdp.gamma)
            else:
                q_learning_step(q, transition, mdp.gamma)
            state = transition.next_state

    converged = converged_episode is not None
    if converged:
        logger.debug("%s seed=%s converged at episode %d", algorithm.value, seed, converged_episode)
    else:
        logger.warning("%s seed=%s did not converge within %d episodes", algorithm.value, seed, schedule.max_episodes)
    curve = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    return TabularTrainingResult(
        algorithm,
        q,
        extract_policy_spe(q, constraints, evaluator),
        curve,
        converged,
        converged_episode,
        converged_samples,
        j_tables,
    )
