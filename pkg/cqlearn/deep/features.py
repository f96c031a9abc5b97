"""State encodings for the networks"""
from __future__ import annotations

import numpy as np

from cqlearn.envs.traffic import HighwayState

POSITION_SCALE = 100.0
VELOCITY_SCALE = 10.0


def vehicle_features(state: HighwayState) -> np.ndarray:
    """[dx / 100, dv / 10, dlane] of every sensed vehicle, shape (n_others, 3)"""
    raw = state.neighbor_features()
    return raw / np.array([POSITION_SCALE, VELOCITY_SCALE, 1.0])


def ego_features(state: HighwayState) -> np.ndarray:
    """[v / v_desired, lane / (num_lanes - 1)]"""
    ego = state.ego
    lane = ego.lane / (state.num_lanes - 1) if state.num_lanes > 1 else 0.0
    return np.array([ego.velocity / ego.desired_velocity, lane])


def encode_states(states, max_vehicles: int | None = None) -> dict:
    """batch of highway states as a padded set observation

    Returns
    -------
    obs : dict
        ``vehicles`` (batch, max_vehicles, 3), ``mask`` (batch, max_vehicles) and ``ego``
        (batch, 2).
    """
    per_state = [vehicle_features(s) for s in states]
    if max_vehicles is None:
        max_vehicles = max((len(v) for v in per_state), default=0)
    vehicles = np.zeros((len(per_state), max_vehicles, 3))
    mask = np.zeros((len(per_state), max_vehicles))
    for i, feats in enumerate(per_state):
        feats = feats[:max_vehicles]
        vehicles[i, : len(feats)] = feats
        mask[i, : len(feats)] = 1.0
    ego = np.array([ego_features(s) for s in states]).reshape(len(per_state), 2)
    return {"vehicles": vehicles, "mask": mask, "ego": ego}


def encode_state(state: HighwayState) -> dict:
    return encode_states([state])


def one_hot(states, n_states: int) -> dict:
    """flat one-hot observation of integer states for :class:`~cqlearn.deep.net.MlpNet`"""
    return {"x": np.eye(n_states)[np.asarray(states, dtype=int)]}
