"""Tabular evaluation MDPs

The counter-example MDP on which Safe Policy Extraction is suboptimal, and the Tree-MDP
family that extends it with ``B`` unsafe distractor paths.

Both MDPs use two actions (0 = ``a``, 1 = ``b``), are deterministic and acyclic (gamma = 1),
and pay their reward on the transition into a terminal state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cqlearn.mdp import FiniteMdp, unsafe_state_constraint

ACTION_A = 0
ACTION_B = 1


def _deterministic_mdp(labels, edges, rewards, terminals, gamma=1.0):
    """build a deterministic two-action MDP from labelled edges

    ``edges`` maps a label to its successor label (both actions) or to a pair of successors
    (action a, action b). ``rewards`` maps (label, action) to the transition reward.
    """
    index = {label: i for i, label in enumerate(labels)}
    n = len(labels)
    transition = np.zeros((n, 2, n))
    reward = np.zeros((n, 2))
    for label, target in edges.items():
        targets = (target, target) if isinstance(target, str) else target
        for action, succ in enumerate(targets):
            transition[index[label], action, index[succ]] = 1.0
    for (label, action), value in rewards.items():
        reward[index[label], action] = value
    terminal = np.zeros(n, dtype=bool)
    for label in terminals:
        terminal[index[label]] = True
        # absorbing
        transition[index[label], :, index[label]] = 1.0
    return FiniteMdp(transition, reward, terminal=terminal, gamma=gamma, state_labels=labels), index


def build_fig3_mdp():
    """12-state counter-example MDP with the unsafe state s6

    s0 -> s1; at s1 action a leads over s2 to the decision state s4, action b over s3, s5,
    s8 to s11 (+2). At s4, action a enters the unsafe s6 and ends in s9 (+3); action b ends
    over s7 in s10 (+1).

    Returns
    -------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
        one safety constraint forbidding the action of s4 that reaches s6.
    """
    labels = [f"s{i}" for i in range(12)]
    edges = {
        "s0": "s1",
        "s1": ("s2", "s3"),
        "s2": "s4",
        "s3": "s5",
        "s4": ("s6", "s7"),
        "s5": "s8",
        "s6": "s9",
        "s7": "s10",
        "s8": "s11",
    }
    rewards = {}
    for label, value in (("s6", 3.0), ("s7", 1.0), ("s8", 2.0)):
        rewards[(label, ACTION_A)] = rewards[(label, ACTION_B)] = value
    mdp, index = _deterministic_mdp(labels, edges, rewards, ("s9", "s10", "s11"))
    return mdp, [unsafe_state_constraint(mdp, [index["s6"]])]


@dataclass(frozen=True)
class TreeMdpParams:
    """parameters of the Tree-MDP family

    Every unsafe path leaves its branching state through the unsafe state and then runs along
    a tail of zero-reward states. Tails are padded so that all unsafe terminals lie at the same
    depth; the safe +1 path stays short.

    Attributes
    ----------
    branches : int
        B, number of unsafe distractor paths in the upper subtree.
    approach_length : int
        non-terminal states between the first decision and the first branching state.
    bottom_length : int
        non-terminal states on the bottom safe path.
    tail_length : int
        states after the unsafe state of the lowest unsafe path.
    gap_length : int
        states between two consecutive branching states.
    """

    branches: int = 1
    approach_length: int = 1
    bottom_length: int = 3
    tail_length: int = 150
    gap_length: int = 0

    def __post_init__(self):
        if self.branches < 1:
            raise ValueError("a Tree MDP needs at least one branch")
        if self.approach_length < 0 or self.bottom_length < 1:
            raise ValueError("path lengths must be non-negative (bottom path >= 1)")
        if self.tail_length < 0 or self.gap_length < 0:
            raise ValueError("tail and gap lengths must be non-negative")

    def unsafe_returns(self) -> list[float]:
        """terminal rewards of the unsafe paths, B+2 down to 3"""
        return [float(self.branches + 3 - k) for k in range(1, self.branches + 1)]

    def tail_lengths(self) -> list[int]:
        """tail length of every unsafe path, longest first"""
        step = self.gap_length + 1
        return [self.tail_length + step * (self.branches - k) for k in range(1, self.branches + 1)]


def build_tree_mdp(params: TreeMdpParams | int = TreeMdpParams()):
    """Tree MDP with B unsafe paths, one safe upper path (+1) and a safe bottom path (+2)

    The upper subtree is a chain of branching states d_1..d_B, separated by ``gap_length``
    states. At d_k action a enters the unsafe state x_k, whose tail ends with reward B+3-k;
    action b continues towards d_{k+1}, and at d_B to the safe path ending with +1. With
    ``TreeMdpParams(branches=1, tail_length=0)`` this is the counter-example MDP.

    Parameters
    ----------
    params : :class:`TreeMdpParams` or int
        an int is read as the number of branches.

    Returns
    -------
    mdp : :class:`~cqlearn.mdp.FiniteMdp`
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
    """
    if not isinstance(params, TreeMdpParams):
        params = TreeMdpParams(branches=int(params))
    n_branches = params.branches
    approach = [f"u{i}" for i in range(1, params.approach_length + 1)]
    decisions = [f"d{k}" for k in range(1, n_branches + 1)]
    unsafe = [f"x{k}" for k in range(1, n_branches + 1)]
    tails = [[f"p{k}_{i}" for i in range(1, n + 1)] for k, n in enumerate(params.tail_lengths(), start=1)]
    gaps = [[f"g{k}_{i}" for i in range(1, params.gap_length + 1)] for k in range(1, n_branches)]
    unsafe_ends = [f"t{k}" for k in range(1, n_branches + 1)]
    bottom = [f"b{i}" for i in range(1, params.bottom_length + 1)]
    labels = ["start", "root", *approach, *decisions, *unsafe]
    labels += [label for chain in (*tails, *gaps) for label in chain]
    labels += [*unsafe_ends, "safe", "safe_end", *bottom, "bottom_end"]

    edges = {"start": "root"}

    def chain(path):
        for prev, succ in zip(path, path[1:]):
            edges[prev] = succ

    upper = [*approach, decisions[0]]
    edges["root"] = (upper[0], bottom[0])
    chain(upper)
    for k in range(n_branches):
        onward = [*gaps[k], decisions[k + 1]] if k + 1 < n_branches else ["safe"]
        edges[decisions[k]] = (unsafe[k], onward[0])
        chain(onward)
        chain([unsafe[k], *tails[k], unsafe_ends[k]])
    chain(["safe", "safe_end"])
    chain([*bottom, "bottom_end"])

    rewards = {}
    last_unsafe = [tail[-1] if tail else x for x, tail in zip(unsafe, tails)]
    ends = [*zip(last_unsafe, params.unsafe_returns()), ("safe", 1.0), (bottom[-1], 2.0)]
    for label, value in ends:
        rewards[(label, ACTION_A)] = rewards[(label, ACTION_B)] = value
    mdp, index = _deterministic_mdp(labels, edges, rewards, [*unsafe_ends, "safe_end", "bottom_end"])
    return mdp, [unsafe_state_constraint(mdp, [index[x] for x in unsafe])]


def unsafe_states(mdp: FiniteMdp) -> list[int]:
    """indices of the unsafe states of a built counter-example or Tree MDP"""
    return [i for i, label in enumerate(mdp.state_labels) if label == "s6" or label.startswith("x")]
