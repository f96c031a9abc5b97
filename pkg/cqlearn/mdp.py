"""Finite MDPs, constraints and safe action sets

A constrained MDP is a :class:`FiniteMdp` plus a list of :class:`ConstraintSpec`.
Each constraint defines a per-state safe set of actions; the safe set of a state under
a constraint family is the intersection of the per-constraint safe sets, resolved by
priority whenever that intersection is empty (see :func:`safe_set`).

"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, NamedTuple, Sequence

import networkx as nx
import numpy as np
import yaml

from cqlearn.errors import ConfigError

PROB_ATOL = 1e-9


class Transition(NamedTuple):
    """single environment transition (s, a, r, s', terminal) with raw constraint signals"""

    state: Any
    action: int
    reward: float
    next_state: Any
    terminal: bool
    signals: dict | None = None


class FiniteMdp:
    """Explicit tabular MDP <S, A, P, r, gamma>.

    States and actions are integer indices. Terminal states are absorbing and carry no value;
    rewards are collected on transitions out of non-terminal states.

    Attributes
    ----------
    transition : numpy.ndarray
        transition kernel of shape (n_states, n_actions, n_states), P[s, a, s'].
    reward : numpy.ndarray
        reward table of shape (n_states, n_actions) or (n_states, n_actions, n_states).
    terminal : numpy.ndarray
        boolean flag per state.
    gamma : float
        discount factor in [0, 1].
    initial_state_dist : numpy.ndarray
        probability vector over initial states.
    """

    def __init__(
        self,
        transition,
        reward,
        terminal=None,
        gamma: float = 0.99,
        initial_state_dist=None,
        state_labels: Sequence[str] | None = None,
    ):
        """
        Parameters
        ----------
        transition : array_like
            P[s, a, s'], every (s, a) row must sum to 1.
        reward : array_like
            r[s, a] or r[s, a, s'].
        terminal : array_like of bool, optional
            terminal flag per state. Defaults to no terminal state.
        gamma : float
            discount factor. Must be < 1 if a cycle through non-terminal states exists.
        initial_state_dist : array_like, optional
            initial state distribution. Defaults to a point mass on state 0.
        state_labels : list of str, optional
            human-readable state names, used for drawing and serialization.
        """
        self.transition = np.array(transition, dtype=float)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ValueError("transition must have shape (n_states, n_actions, n_states)")
        n_states, n_actions, _ = self.transition.shape
        self.reward = np.array(reward, dtype=float)
        if self.reward.shape not in {(n_states, n_actions), (n_states, n_actions, n_states)}:
            raise ValueError(f"reward shape {self.reward.shape} does not match the transition kernel")
        if terminal is None:
            terminal = np.zeros(n_states, dtype=bool)
        self.terminal = np.array(terminal, dtype=bool)
        if self.terminal.shape != (n_states,):
            raise ValueError("terminal must hold one flag per state")
        if initial_state_dist is None:
            initial_state_dist = np.eye(n_states)[0]
        self.initial_state_dist = np.array(initial_state_dist, dtype=float)
        self.gamma = float(gamma)
        if state_labels is None:
            state_labels = [f"s{i}" for i in range(n_states)]
        if len(state_labels) != n_states:
            raise ValueError("one label per state is required")
        self.state_labels = list(state_labels)
        self._validate()
        for arr in (self.transition, self.reward, self.terminal, self.initial_state_dist):
            arr.setflags(write=False)

    def _validate(self):
        if np.any(self.transition < 0.0) or np.any(self.transition > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if not np.allclose(self.transition.sum(axis=2), 1.0, rtol=0.0, atol=PROB_ATOL):
            raise ValueError("every (s, a) row of the transition kernel must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")
        if self.initial_state_dist.shape != (self.n_states,) or np.any(self.initial_state_dist < 0.0):
            raise ValueError("initial_state_dist must be a probability vector over states")
        if not np.isclose(self.initial_state_dist.sum(), 1.0, rtol=0.0, atol=PROB_ATOL):
            raise ValueError("initial_state_dist must sum to 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.gamma == 1.0 and not nx.is_directed_acyclic_graph(self.support_graph()):
            raise ValueError("gamma < 1 is required when a cycle through non-terminal states exists")

    def __repr__(self):
        return f"FiniteMdp(n_states={self.n_states}, n_actions={self.n_actions}, gamma={self.gamma})"

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> np.ndarray:
        """expected immediate reward r(s, a), zero on terminal states

        Returns
        -------
        r : numpy.ndarray
            array of shape (n_states, n_actions)
        """
        if self.reward.ndim == 3:
            r = np.einsum("ijk,ijk->ij", self.transition, self.reward)
        else:
            r = self.reward.copy()
        r[self.terminal] = 0.0
        return r

    def support_graph(self) -> nx.DiGraph:
        """directed graph with an edge s -> s' whenever some action reaches s' from non-terminal s"""
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.n_states))
        for s, _, s_next in zip(*np.nonzero(self.transition > 0.0)):
            if not self.terminal[s]:
                graph.add_edge(int(s), int(s_next))
        return graph

    def sample_initial_state(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_states, p=self.initial_state_dist))

    def step(self, state: int, action: int, rng: np.random.Generator) -> Transition:
        """sample a successor of (state, action)

        Returns
        -------
        transition : :class:`Transition`
        """
        p = self.transition[state, action]
        if np.count_nonzero(p) == 1:
            next_state = int(np.argmax(p))
        else:
            next_state = int(rng.choice(self.n_states, p=p))
        if self.reward.ndim == 3:
            reward = float(self.reward[state, action, next_state])
        else:
            reward = float(self.reward[state, action])
        return Transition(state, action, reward, next_state, bool(self.terminal[next_state]))

    def to_dict(self) -> dict:
        """structured form used by :meth:`save`: transition and reward triplets, terminals, gamma"""
        transitions = [
            [int(s), int(a), int(t), float(self.transition[s, a, t])] for s, a, t in zip(*np.nonzero(self.transition))
        ]
        if self.reward.ndim == 3:
            rewards = [
                [int(s), int(a), int(t), float(self.reward[s, a, t])] for s, a, t in zip(*np.nonzero(self.reward))
            ]
        else:
            rewards = [[int(s), int(a), float(self.reward[s, a])] for s, a in zip(*np.nonzero(self.reward))]
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "terminal": [int(s) for s in np.flatnonzero(self.terminal)],
            "initial_state_dist": {
                int(s): float(self.initial_state_dist[s]) for s in np.flatnonzero(self.initial_state_dist)
            },
            "transitions": transitions,
            "reward_shape": list(self.reward.shape),
            "rewards": rewards,
            "state_labels": self.state_labels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FiniteMdp":
        n_states, n_actions = int(data["n_states"]), int(data["n_actions"])
        transition = np.zeros((n_states, n_actions, n_states))
        for s, a, t, p in data["transitions"]:
            transition[s, a, t] = p
        reward = np.zeros(tuple(data.get("reward_shape", (n_states, n_actions))))
        for entry in data.get("rewards", []):
            reward[tuple(int(i) for i in entry[:-1])] = entry[-1]
        terminal = np.zeros(n_states, dtype=bool)
        terminal[list(data.get("terminal", []))] = True
        initial = np.zeros(n_states)
        for s, p in data.get("initial_state_dist", {0: 1.0}).items():
            initial[int(s)] = p
        return cls(
            transition,
            reward,
            terminal=terminal,
            gamma=data.get("gamma", 0.99),
            initial_state_dist=initial,
            state_labels=data.get("state_labels"),
        )

    def save(self, path):
        """write the MDP as a YAML fixture file"""
        with open(path, "w", encoding="utf-8") as fp:
            yaml.safe_dump(self.to_dict(), fp, sort_keys=False)

    @classmethod
    def load(cls, path) -> "FiniteMdp":
        with open(path, "r", encoding="utf-8") as fp:
            return cls.from_dict(yaml.safe_load(fp))


class Direction(Enum):
    AT_MOST = "at_most"
    AT_LEAST = "at_least"


class ConstraintKind(Enum):
    SINGLE_STEP = "single_step"
    MULTI_STEP = "multi_step"


class Priority(Enum):
    SAFETY = "safety"
    REGULAR = "regular"


@dataclass(frozen=True)
class ConstraintSpec:
    """A named constraint c_k with threshold beta and comparison direction.

    Single-step constraints evaluate ``signal(state, action)`` directly. Multi-step constraints
    compare a truncated constraint value J_H(s, a) of their ``immediate_signal`` against the
    threshold; the values come from a :class:`ConstraintValueSource`.

    Attributes
    ----------
    name : str
        identifier, also the key used by constraint-value sources.
    threshold : float
        beta.
    signal : callable, optional
        (state, action) -> float, required for single-step constraints.
    direction : :class:`Direction`
        AT_MOST: safe iff value <= threshold. AT_LEAST: safe iff value >= threshold.
    kind : :class:`ConstraintKind`
    horizon : int
        H for multi-step constraints.
    immediate_signal : callable, optional
        :class:`Transition` -> float, the per-step signal j_t of a multi-step constraint.
    priority : :class:`Priority`
        safety constraints survive empty-intersection resolution.
    exempt_actions : tuple of int
        actions that this constraint never masks.
    """

    name: str
    threshold: float = 0.0
    signal: Callable | None = None
    direction: Direction = Direction.AT_MOST
    kind: ConstraintKind = ConstraintKind.SINGLE_STEP
    horizon: int = 1
    immediate_signal: Callable | None = None
    priority: Priority = Priority.REGULAR
    exempt_actions: tuple = ()

    def __post_init__(self):
        if self.kind is ConstraintKind.SINGLE_STEP and self.signal is None:
            raise ConfigError(f"single-step constraint {self.name!r} needs a signal")
        if self.kind is ConstraintKind.MULTI_STEP:
            if self.immediate_signal is None:
                raise ConfigError(f"multi-step constraint {self.name!r} needs an immediate signal")
            if self.horizon < 1:
                raise ConfigError(f"multi-step constraint {self.name!r} needs horizon >= 1")

    @property
    def is_multi_step(self) -> bool:
        return self.kind is ConstraintKind.MULTI_STEP

    def satisfied(self, values) -> np.ndarray:
        """elementwise threshold test, ignoring exemptions"""
        values = np.asarray(values, dtype=float)
        if self.direction is Direction.AT_MOST:
            return values <= self.threshold
        return values >= self.threshold

    def mask(self, values) -> np.ndarray:
        """per-action safe mask from constraint values, exempt actions always allowed"""
        allowed = np.array(self.satisfied(values), dtype=bool)
        if self.exempt_actions:
            allowed[..., list(self.exempt_actions)] = True
        return allowed


class ConstraintValueSource(ABC):
    """Source of truncated constraint values J_H(s, .) for multi-step constraints."""

    @abstractmethod
    def values(self, constraint: ConstraintSpec, state) -> np.ndarray:
        """J values of ``constraint`` at its own horizon for every action in ``state``

        Raises
        ------
        ConfigError
            if the source does not know the constraint.
        """
        raise NotImplementedError

    def ready(self, constraint: ConstraintSpec) -> bool:
        """False while estimates are untrusted (warm-up); the constraint is then ignored"""
        return True


class StaticValueSource(ConstraintValueSource):
    """Constraint values from fixed tables.

    Each entry is either an array of shape (n_states, n_actions) indexed by integer states
    or a callable state -> per-action values.
    """

    def __init__(self, tables: dict):
        self.tables = dict(tables)

    def values(self, constraint, state):
        if constraint.name not in self.tables:
            raise ConfigError(f"no constraint values for {constraint.name!r}")
        table = self.tables[constraint.name]
        if callable(table):
            return np.asarray(table(state), dtype=float)
        return np.asarray(table, dtype=float)[state]


class TableSignal:
    """single-step signal read from a (n_states, n_actions) table; picklable"""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def __call__(self, state, action):
        return float(self.table[state, action])


def forbidden_action_constraint(name: str, forbidden, priority: Priority = Priority.SAFETY) -> ConstraintSpec:
    """single-step constraint forbidding the (s, a) pairs flagged in ``forbidden``

    The signal is the {0, 1} indicator of the table, with threshold 0.
    """
    table = np.asarray(forbidden, dtype=bool).astype(float)
    return ConstraintSpec(name=name, threshold=0.0, signal=TableSignal(table), priority=priority)


def unsafe_state_constraint(mdp: FiniteMdp, unsafe_states, name: str = "unsafe_states") -> ConstraintSpec:
    """single-step constraint forbidding every action that may reach one of ``unsafe_states``"""
    unsafe = np.zeros(mdp.n_states, dtype=bool)
    unsafe[list(unsafe_states)] = True
    forbidden = mdp.transition[:, :, unsafe].sum(axis=2) > 0.0
    forbidden[mdp.terminal] = False
    return forbidden_action_constraint(name, forbidden)


def constraint_values(constraint: ConstraintSpec, state, n_actions: int, evaluator=None) -> np.ndarray:
    """per-action values of one constraint in ``state``"""
    if not constraint.is_multi_step:
        return np.array([constraint.signal(state, a) for a in range(n_actions)], dtype=float)
    if evaluator is None:
        raise ConfigError(f"multi-step constraint {constraint.name!r} needs a constraint-value source")
    values = np.asarray(evaluator.values(constraint, state), dtype=float)
    if values.shape != (n_actions,):
        raise ConfigError(f"constraint values for {constraint.name!r} must have shape ({n_actions},)")
    return values


def constraint_mask(constraint: ConstraintSpec, state, n_actions: int, evaluator=None) -> np.ndarray:
    """per-constraint safe set S_{c_k}(state) as a boolean mask"""
    if constraint.is_multi_step and evaluator is not None and not evaluator.ready(constraint):
        return np.ones(n_actions, dtype=bool)
    return constraint.mask(constraint_values(constraint, state, n_actions, evaluator))


def resolve_masks(masks, priorities, n_actions: int, fallback_action: int = 0) -> np.ndarray:
    """intersect per-constraint masks, resolving an empty intersection by priority

    The full intersection is returned when it is non-empty. Otherwise regular constraints are
    dropped as a group and the safety intersection is returned; if that is empty as well, only
    ``fallback_action`` is allowed.
    """
    allowed = np.ones(n_actions, dtype=bool)
    safety = np.ones(n_actions, dtype=bool)
    for mask, priority in zip(masks, priorities):
        allowed &= mask
        if priority is Priority.SAFETY:
            safety &= mask
    if allowed.any():
        return allowed
    if safety.any():
        return safety
    fallback = np.zeros(n_actions, dtype=bool)
    fallback[fallback_action] = True
    return fallback


def resolve_masks_batch(masks, priorities, n_actions: int, fallback_action: int = 0) -> np.ndarray:
    """row-wise :func:`resolve_masks` for masks of shape (batch, n_actions)"""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        return np.ones((0, n_actions), dtype=bool)
    allowed = np.logical_and.reduce(masks)
    safety = np.ones_like(allowed)
    for mask, priority in zip(masks, priorities):
        if priority is Priority.SAFETY:
            safety &= mask
    resolved = np.where(allowed.any(axis=1, keepdims=True), allowed, safety)
    empty = ~resolved.any(axis=1)
    resolved[empty] = False
    resolved[empty, fallback_action] = True
    return resolved


def safe_set(
    state,
    constraints: Sequence[ConstraintSpec],
    n_actions: int,
    evaluator: ConstraintValueSource | None = None,
    fallback_action: int = 0,
    resolve: bool = True,
) -> np.ndarray:
    """safe action set S_C(state) as a boolean mask over actions

    Parameters
    ----------
    state :
        state in whatever representation the constraint signals accept.
    constraints : list of :class:`ConstraintSpec`
        constraint family C. An empty family allows every action.
    n_actions : int
        size of the action set.
    evaluator : :class:`ConstraintValueSource`, optional
        source of J values for multi-step constraints.
    fallback_action : int
        designated always-safe action used when even the safety intersection is empty.
    resolve : bool
        if False, return the raw intersection (possibly empty).

    Returns
    -------
    allowed : numpy.ndarray
        boolean mask of shape (n_actions,); non-empty whenever ``resolve`` is True.
    """
    masks = [constraint_mask(c, state, n_actions, evaluator) for c in constraints]
    if not resolve:
        allowed = np.ones(n_actions, dtype=bool)
        for mask in masks:
            allowed &= mask
        return allowed
    return resolve_masks(masks, [c.priority for c in constraints], n_actions, fallback_action)


def greedy_action(values, mask=None) -> int:
    """argmax of ``values`` restricted to ``mask``; ties go to the lowest action index"""
    values = np.asarray(values, dtype=float)
    if mask is None:
        return int(np.argmax(values))
    return int(np.argmax(np.where(mask, values, -np.inf)))


class Policy(ABC):
    """deterministic policy pi: S -> A"""

    @abstractmethod
    def act(self, state) -> int:
        raise NotImplementedError

    def __call__(self, state) -> int:
        return self.act(state)


class TabularPolicy(Policy):
    """deterministic action per integer state"""

    def __init__(self, actions):
        self.actions = np.array(actions, dtype=int)

    def act(self, state):
        return int(self.actions[state])

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, TabularPolicy):
            return NotImplemented
        return np.array_equal(self.actions, other.actions)

    def __repr__(self):
        return f"TabularPolicy({self.actions.tolist()})"


class GreedyPolicy(Policy):
    """greedy policy over a Q function, restricted to the safe set of each state

    Parameters
    ----------
    q_function : callable
        state -> per-action Q values.
    constraints : list of :class:`ConstraintSpec`
        constraints applied at extraction; empty for the plain greedy policy.
    n_actions : int
    evaluator : :class:`ConstraintValueSource`, optional
    fallback_action : int
    """

    def __init__(self, q_function, constraints=(), n_actions=None, evaluator=None, fallback_action=0):
        self.q_function = q_function
        self.constraints = list(constraints)
        self.n_actions = n_actions
        self.evaluator = evaluator
        self.fallback_action = fallback_action

    def act(self, state):
        q = np.asarray(self.q_function(state), dtype=float)
        mask = safe_set(state, self.constraints, len(q), self.evaluator, self.fallback_action)
        return greedy_action(q, mask)


def extract_policy_spe(q, constraints=(), evaluator=None, fallback_action: int = 0) -> Policy:
    """Safe Policy Extraction: pi(s) = argmax over S_C(s) of Q(s, a)

    Parameters
    ----------
    q : array_like, :class:`~cqlearn.tabular.QTable` or callable
        tabular Q values of shape (n_states, n_actions), an object exposing such a ``values``
        table, or a callable state -> per-action Q values (function approximation).
    constraints : list of :class:`ConstraintSpec`
    evaluator : :class:`ConstraintValueSource`, optional
    fallback_action : int

    Returns
    -------
    policy : :class:`TabularPolicy` for tables, :class:`GreedyPolicy` for callables.
    """
    if callable(q) and not isinstance(q, np.ndarray):
        return GreedyPolicy(q, constraints, evaluator=evaluator, fallback_action=fallback_action)
    table = np.asarray(getattr(q, "values", q), dtype=float)
    n_states, n_actions = table.shape
    actions = [
        greedy_action(table[s], safe_set(s, constraints, n_actions, evaluator, fallback_action))
        for s in range(n_states)
    ]
    return TabularPolicy(actions)
