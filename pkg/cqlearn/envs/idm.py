"""Intelligent Driver Model

Longitudinal car-following law used for every vehicle of the highway environment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IdmParams:
    """IDM parameters

    Attributes
    ----------
    max_acceleration : float
        a_max in m/s^2.
    comfortable_deceleration : float
        b in m/s^2.
    delta : float
        acceleration exponent.
    time_headway : float
        desired time headway T in s.
    min_gap : float
        jam distance s0 in m.
    emergency_deceleration : float
        b_max in m/s^2, applied when the gap is closed.
    """

    max_acceleration: float = 1.5
    comfortable_deceleration: float = 2.0
    delta: float = 4.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    emergency_deceleration: float = 9.0


def desired_gap(velocity, approach_rate, params: IdmParams = IdmParams()):
    """s*(v, dv) = s0 + max(0, v T + v dv / (2 sqrt(a_max b)))"""
    dynamic = velocity * params.time_headway + velocity * approach_rate / (
        2.0 * np.sqrt(params.max_acceleration * params.comfortable_deceleration)
    )
    return params.min_gap + np.maximum(0.0, dynamic)


def idm_acceleration_array(velocity, desired_velocity, gap, leader_velocity, params: IdmParams = IdmParams()):
    """vectorized IDM; ``gap`` is ``inf`` where no leader exists

    Returns
    -------
    acceleration : numpy.ndarray
        clipped to [-b_max, a_max]; exactly -b_max where the gap is closed.
    """
    velocity = np.asarray(velocity, dtype=float)
    gap = np.asarray(gap, dtype=float)
    free = 1.0 - (velocity / np.asarray(desired_velocity, dtype=float)) ** params.delta
    has_leader = np.isfinite(gap)
    approach = np.where(has_leader, velocity - np.asarray(leader_velocity, dtype=float), 0.0)
    safe_gap = np.where(has_leader & (gap > 0.0), gap, 1.0)
    interaction = np.where(has_leader, (desired_gap(velocity, approach, params) / safe_gap) ** 2, 0.0)
    acc = params.max_acceleration * (free - interaction)
    acc = np.clip(acc, -params.emergency_deceleration, params.max_acceleration)
    return np.where(has_leader & (gap <= 0.0), -params.emergency_deceleration, acc)


def idm_acceleration(ego, leader=None, params: IdmParams = IdmParams(), gap: float | None = None) -> float:
    """IDM acceleration of ``ego`` behind ``leader``

    Parameters
    ----------
    ego : :class:`~cqlearn.envs.traffic.Vehicle`
    leader : :class:`~cqlearn.envs.traffic.Vehicle`, optional
        vehicle ahead on the same lane; free-road driving when omitted.
    params : :class:`IdmParams`
    gap : float, optional
        bumper-to-bumper gap. Defaults to ``leader.position - leader.length - ego.position``.

    Returns
    -------
    acceleration : float
        in m/s^2, -b_max when the gap is closed (collision).
    """
    if leader is None:
        return float(idm_acceleration_array(ego.velocity, ego.desired_velocity, np.inf, 0.0, params))
    if gap is None:
        gap = leader.position - leader.length - ego.position
    return float(idm_acceleration_array(ego.velocity, ego.desired_velocity, gap, leader.velocity, params))
