"""Driving constraints

Safety (constant-velocity prediction plus lane bounds), keep-right and the two comfort
variants, expressed as :class:`~cqlearn.mdp.ConstraintSpec` instances over
:class:`~cqlearn.envs.traffic.HighwayState`.

"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cqlearn.envs.traffic import N_ACTIONS, HighwayAction, HighwayState, ring_offset
from cqlearn.errors import ConfigError
from cqlearn.mdp import ConstraintKind, ConstraintSpec, Direction, Priority

SIGNAL_NAMES = ("c_safe", "c_lane", "c_r", "c_l")
COMFORT_VARIANTS = ("lcmax", "vgmin", "none")


@dataclass(frozen=True)
class SafetyCheckerParams:
    """constant-velocity safety checker

    Attributes
    ----------
    prediction_horizon : float
        seconds of constant-velocity prediction.
    check_interval : float
        spacing of the predicted instants.
    required_time_headway : float
        minimal time headway in seconds on the target lane.
    """

    prediction_horizon: float = 4.0
    check_interval: float = 0.5
    required_time_headway: float = 1.5

    def __post_init__(self):
        if min(self.prediction_horizon, self.check_interval, self.required_time_headway) <= 0.0:
            raise ConfigError("safety checker parameters must be positive")

    def instants(self) -> np.ndarray:
        n = int(round(self.prediction_horizon / self.check_interval))
        return np.arange(n + 1) * self.check_interval


@dataclass(frozen=True)
class HighwayConstraintParams:
    """parameters of the driving constraint stack

    ``comfort`` selects the comfort variant: ``"lcmax"`` bounds the lane changes within the
    horizon, ``"vgmin"`` requires a minimal velocity gain for lane changes.
    """

    t_gap: float = 10.0
    safety: SafetyCheckerParams = field(default_factory=SafetyCheckerParams)
    comfort: str = "lcmax"
    horizon: int = 5
    beta_lcmax: float = 2.0
    beta_vgmin: float = 0.25
    warmup: int = 1000

    def __post_init__(self):
        if self.comfort not in COMFORT_VARIANTS:
            raise ConfigError(f"unknown comfort variant {self.comfort!r}")
        if self.horizon < 1:
            raise ConfigError("comfort horizon must be >= 1")
        if self.t_gap <= 0.0:
            raise ConfigError("t_gap must be positive")


@dataclass(frozen=True)
class GapTimes:
    """time to reach the closest leader at desired velocity, per lane (inf without leader)"""

    dt_same: float
    dt_left: float
    dt_right: float


def target_lane(state: HighwayState, action) -> int:
    """lane index after ``action``, possibly off-road"""
    return state.ego.lane + HighwayAction(action).lane_delta


def c_lane(state: HighwayState, action) -> float:
    lane = target_lane(state, action)
    return float(lane < 0) + float(lane >= state.num_lanes)


def _closest(state: HighwayState, lane: int):
    """closest leader and follower on ``lane`` as (dx, vehicle) pairs"""
    leader = follower = None
    for vehicle in state.on_lane(lane):
        dx = float(ring_offset(vehicle.position, state.ego.position, state.road_length))
        if dx >= 0.0:
            if leader is None or dx < leader[0]:
                leader = (dx, vehicle)
        elif follower is None or dx > follower[0]:
            follower = (dx, vehicle)
    return leader, follower


def c_safe(state: HighwayState, action, params: SafetyCheckerParams = SafetyCheckerParams()) -> float:
    """1 if a lane change brings the ego below the required time headway on the target lane

    Both the ego behind the new leader and the new follower behind the ego are predicted at
    constant velocity over the prediction horizon. Keeping the lane is always safe.
    """
    action = HighwayAction(action)
    if not action.is_lane_change:
        return 0.0
    lane = target_lane(state, action)
    if not 0 <= lane < state.num_lanes:
        return 0.0
    ego = state.ego
    t = params.instants()
    leader, follower = _closest(state, lane)
    if leader is not None:
        dx, vehicle = leader
        gap = dx - vehicle.length + (vehicle.velocity - ego.velocity) * t
        if np.any((gap <= 0.0) | (gap < params.required_time_headway * ego.velocity)):
            return 1.0
    if follower is not None:
        dx, vehicle = follower
        gap = -dx - ego.length + (ego.velocity - vehicle.velocity) * t
        if np.any((gap <= 0.0) | (gap < params.required_time_headway * vehicle.velocity)):
            return 1.0
    return 0.0


def gap_times(state: HighwayState) -> GapTimes:
    """time gaps to the closest leader on the same, left and right lane

    dt = (leader position - ego position - leader length) / ego desired velocity, ``inf``
    without a leader in sensor range and 0 for a lane that does not exist.
    """
    ego = state.ego

    def gap(lane):
        if not 0 <= lane < state.num_lanes:
            return 0.0
        leader, _ = _closest(state, lane)
        if leader is None:
            return np.inf
        dx, vehicle = leader
        return max(dx - vehicle.length, 0.0) / ego.desired_velocity

    return GapTimes(gap(ego.lane), gap(ego.lane + 1), gap(ego.lane - 1))


def keep_right_signals(state: HighwayState, action, t_gap: float = 10.0, gaps: GapTimes | None = None):
    """(c_r, c_l) of the keep-right rule

    c_r fires for every action but a right change when the right and current lanes are free
    for more than ``t_gap``; c_l fires for a left change when the left and current lanes are
    free. c_l is reported as 0 whenever c_r already fires, which leaves the safe set unchanged.
    """
    action = HighwayAction(action)
    gaps = gaps or gap_times(state)
    c_r = action is not HighwayAction.RIGHT and gaps.dt_right > t_gap and gaps.dt_same > t_gap
    c_l = action is HighwayAction.LEFT and gaps.dt_left > t_gap and gaps.dt_same > t_gap and not c_r
    return float(c_r), float(c_l)


def signal_table(state: HighwayState, params: HighwayConstraintParams = HighwayConstraintParams()) -> dict:
    """every single-step signal for every action

    Returns
    -------
    table : dict of str to numpy.ndarray
        ``c_safe``, ``c_lane``, ``c_r``, ``c_l`` and the summed constraint signals ``safety`` and
        ``keep_right``, each of shape (3,).
    """
    gaps = gap_times(state)
    table = {name: np.zeros(N_ACTIONS) for name in SIGNAL_NAMES}
    for action in HighwayAction:
        table["c_safe"][action] = c_safe(state, action, params.safety)
        table["c_lane"][action] = c_lane(state, action)
        table["c_r"][action], table["c_l"][action] = keep_right_signals(state, action, params.t_gap, gaps)
    table["safety"] = table["c_safe"] + table["c_lane"]
    table["keep_right"] = table["c_r"] + table["c_l"]
    return table


class StateSignal:
    """single-step constraint signal read from :func:`signal_table`; picklable"""

    def __init__(self, name: str, params: HighwayConstraintParams):
        self.name = name
        self.params = params

    def __call__(self, state, action):
        return float(signal_table(state, self.params)[self.name][action])


def lane_change_signal(transition) -> float:
    """j_t = 1 if the ego changed lanes during the transition"""
    return float(transition.signals["j_lane_change"])


def velocity_gain_signal(transition) -> float:
    """j_t = v_{t+1} - v_t of the ego"""
    return float(transition.signals["j_velocity_gain"])


def build_constraint_stack(params: HighwayConstraintParams = HighwayConstraintParams()) -> list[ConstraintSpec]:
    """ordered constraint list: safety, keep-right and the configured comfort variant"""
    constraints = [
        ConstraintSpec("safety", 0.0, StateSignal("safety", params), priority=Priority.SAFETY),
        ConstraintSpec("keep_right", 0.0, StateSignal("keep_right", params)),
    ]
    if params.comfort == "lcmax":
        constraints.append(
            ConstraintSpec(
                "comfort",
                params.beta_lcmax,
                kind=ConstraintKind.MULTI_STEP,
                horizon=params.horizon,
                immediate_signal=lane_change_signal,
            )
        )
    elif params.comfort == "vgmin":
        constraints.append(
            ConstraintSpec(
                "comfort",
                params.beta_vgmin,
                direction=Direction.AT_LEAST,
                kind=ConstraintKind.MULTI_STEP,
                horizon=params.horizon,
                immediate_signal=velocity_gain_signal,
                exempt_actions=(int(HighwayAction.KEEP_LANE),),
            )
        )
    return constraints


def comfort_immediate_signal(signals: dict, params: HighwayConstraintParams) -> float:
    """j_t of the configured comfort variant from recorded step signals"""
    if params.comfort == "vgmin":
        return float(signals["j_velocity_gain"])
    return float(signals["j_lane_change"])


def lane_changes_in_window(lane_changes, window_steps: int = 5) -> np.ndarray:
    """number of lane changes in every sliding window of ``window_steps`` decisions"""
    lane_changes = np.asarray(lane_changes, dtype=float)
    if lane_changes.size < window_steps:
        return np.array([lane_changes.sum()]) if lane_changes.size else np.zeros(0)
    return np.convolve(lane_changes, np.ones(window_steps), mode="valid")


def comfort_violations(lane_changes, window_steps: int = 5, beta: float = 2.0) -> int:
    """number of sliding windows with more than ``beta`` lane changes"""
    return int(np.sum(lane_changes_in_window(lane_changes, window_steps) > beta))
