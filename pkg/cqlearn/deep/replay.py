"""Fixed-batch replay buffer

A :class:`ReplayBuffer` holds a frozen set of transitions together with every constraint
signal needed by the training methods, so one buffer serves all of them: per-action
single-step signal tables at s and s', the immediate multi-step signals, and the reward
shaping features (lane-change flag and lane index).

"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from cqlearn.envs.traffic import N_ACTIONS, HighwayAction
from cqlearn.deep.features import encode_states
from cqlearn.highway_constraints import signal_table

logger = logging.getLogger(__name__)


def _index(tree, idx):
    return {k: v[idx] for k, v in tree.items()}


@dataclass
class Batch:
    """minibatch view of a :class:`ReplayBuffer`"""

    obs: dict
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: dict
    terminals: np.ndarray
    signals: dict
    next_signals: dict
    j: dict
    lane: np.ndarray
    lane_change: np.ndarray

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """immutable transition store with uniform minibatch sampling

    Parameters
    ----------
    obs, next_obs : dict of numpy.ndarray
        network observations of s and s', leading dimension n.
    actions, rewards, terminals : numpy.ndarray
    signals, next_signals : dict of str to numpy.ndarray
        per-action single-step constraint signals at s and s', shape (n, n_actions).
    j : dict of str to numpy.ndarray, optional
        immediate multi-step signals j_t, shape (n,).
    lane : numpy.ndarray, optional
        lane index of the ego at s (the keep-right shaping feature).
    lane_change : numpy.ndarray, optional
        1 for lane-change actions (the lane-change shaping feature).
    """

    def __init__(
        self,
        obs,
        actions,
        rewards,
        next_obs,
        terminals,
        signals=None,
        next_signals=None,
        j=None,
        lane=None,
        lane_change=None,
    ):
        n = len(actions)
        self.obs = {k: np.asarray(v, dtype=float) for k, v in obs.items()}
        self.actions = np.asarray(actions, dtype=int).reshape(n)
        self.rewards = np.asarray(rewards, dtype=float).reshape(n)
        self.next_obs = {k: np.asarray(v, dtype=float) for k, v in next_obs.items()}
        self.terminals = np.asarray(terminals, dtype=bool).reshape(n)
        self.signals = {k: np.asarray(v, dtype=float) for k, v in (signals or {}).items()}
        self.next_signals = {k: np.asarray(v, dtype=float) for k, v in (next_signals or {}).items()}
        self.j = {k: np.asarray(v, dtype=float).reshape(n) for k, v in (j or {}).items()}
        self.lane = np.zeros(n) if lane is None else np.asarray(lane, dtype=float).reshape(n)
        self.lane_change = np.zeros(n) if lane_change is None else np.asarray(lane_change, dtype=float).reshape(n)
        for name, arr in self._arrays():
            if len(arr) != n:
                raise ValueError(f"buffer field {name} has {len(arr)} rows, expected {n}")
            arr.setflags(write=False)

    def __len__(self):
        return len(self.actions)

    def _arrays(self):
        yield from (("obs." + k, v) for k, v in sorted(self.obs.items()))
        yield from (("next_obs." + k, v) for k, v in sorted(self.next_obs.items()))
        yield from (("signals." + k, v) for k, v in sorted(self.signals.items()))
        yield from (("next_signals." + k, v) for k, v in sorted(self.next_signals.items()))
        yield from (("j." + k, v) for k, v in sorted(self.j.items()))
        for name in ("actions", "rewards", "terminals", "lane", "lane_change"):
            yield name, getattr(self, name)

    def checksum(self) -> str:
        """SHA-256 over every stored array"""
        digest = hashlib.sha256()
        for name, arr in self._arrays():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    def take(self, idx) -> Batch:
        return Batch(
            _index(self.obs, idx),
            self.actions[idx],
            self.rewards[idx],
            _index(self.next_obs, idx),
            self.terminals[idx],
            _index(self.signals, idx),
            _index(self.next_signals, idx),
            _index(self.j, idx),
            self.lane[idx],
            self.lane_change[idx],
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """uniform minibatch with replacement"""
        return self.take(rng.integers(len(self), size=batch_size))

    def save(self, path):
        arrays = {name: arr for name, arr in self._arrays()}
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as data:
            groups = {"obs": {}, "next_obs": {}, "signals": {}, "next_signals": {}, "j": {}}
            flat = {}
            for name in data.files:
                group, _, key = name.partition(".")
                if key:
                    groups[group][key] = data[name]
                else:
                    flat[name] = data[name]
        return cls(
            groups["obs"],
            flat["actions"],
            flat["rewards"],
            groups["next_obs"],
            flat["terminals"],
            groups["signals"],
            groups["next_signals"],
            groups["j"],
            flat["lane"],
            flat["lane_change"],
        )


def collect_fixed_batch(env, n_transitions: int, rng=None, policy=None, vehicle_counts=None) -> ReplayBuffer:
    """fixed batch of transitions from an exploratory policy

    Parameters
    ----------
    env : :class:`~cqlearn.envs.highway.HighwayEnv`
    n_transitions : int
    rng : numpy.random.Generator or int, optional
    policy : callable, optional
        (state, rng) -> action; uniformly random actions by default.
    vehicle_counts : list of int, optional
        number of vehicles drawn per episode; ``env.config.num_vehicles`` by default.

    Returns
    -------
    buffer : :class:`ReplayBuffer`
        highway transitions are never terminal (time-limit truncation).
    """
    rng = np.random.default_rng(rng)
    params = env.constraint_params
    states, next_states, actions, rewards = [], [], [], []
    tables, next_tables, j_lane, j_gain = [], [], [], []
    state = None
    table = None
    truncated = True
    while len(actions) < n_transitions:
        if truncated:
            counts = vehicle_counts or [env.config.num_vehicles]
            state = env.reset(rng, num_vehicles=int(counts[rng.integers(len(counts))]))
            table = signal_table(state, params)
        action = int(rng.integers(N_ACTIONS)) if policy is None else int(policy(state, rng))
        next_state, reward, _, truncated, info = env.step(action)
        next_table = signal_table(next_state, params)
        states.append(state)
        next_states.append(next_state)
        actions.append(action)
        rewards.append(reward)
        tables.append(table)
        next_tables.append(next_table)
        j_lane.append(info["j_lane_change"])
        j_gain.append(info["j_velocity_gain"])
        state, table = next_state, next_table

    names = list(tables[0]) if tables else ["c_safe", "c_lane", "c_r", "c_l", "safety", "keep_right"]
    max_vehicles = max((len(s.others) for s in states + next_states), default=0)
    actions = np.array(actions, dtype=int)
    buffer = ReplayBuffer(
        encode_states(states, max_vehicles),
        actions,
        rewards,
        encode_states(next_states, max_vehicles),
        np.zeros(len(actions), dtype=bool),
        {k: np.array([t[k] for t in tables]).reshape(-1, N_ACTIONS) for k in names},
        {k: np.array([t[k] for t in next_tables]).reshape(-1, N_ACTIONS) for k in names},
        {"j_lane_change": j_lane, "j_velocity_gain": j_gain},
        [s.ego.lane for s in states],
        actions != HighwayAction.KEEP_LANE,
    )
    logger.info("collected %d transitions (checksum %s)", len(buffer), buffer.checksum()[:12])
    return buffer
