"""Multi-lane ring-road highway

High-level lane-change decisions for the ego vehicle every ``decision_interval`` seconds;
longitudinal motion of all vehicles follows the Intelligent Driver Model, integrated with
``physics_step``. Other vehicles keep their lanes.

"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from cqlearn.envs.idm import IdmParams, idm_acceleration_array
from cqlearn.envs.traffic import HighwayAction, HighwayState, Vehicle
from cqlearn.errors import ConfigError
from cqlearn.highway_constraints import HighwayConstraintParams, signal_table

logger = logging.getLogger(__name__)

STEP_SIGNALS = ("c_safe", "c_lane", "c_r", "c_l", "j_lane_change", "j_velocity_gain")


@dataclass(frozen=True)
class EnvConfig:
    """highway environment parameters (lengths in m, times in s, velocities in m/s)"""

    num_lanes: int = 3
    num_vehicles: int = 20
    road_length: float = 1000.0
    decision_interval: float = 2.0
    physics_step: float = 0.1
    sensor_range: float = 100.0
    episode_steps: int = 60
    ego_desired_velocity: float = 25.0
    min_desired_velocity: float = 20.0
    max_desired_velocity: float = 30.0
    initial_speed_ratio: float = 0.8
    slot_length: float = 25.0
    idm: IdmParams = field(default_factory=IdmParams)

    def __post_init__(self):
        if self.num_lanes < 1:
            raise ConfigError("num_lanes must be >= 1")
        if self.num_vehicles < 0:
            raise ConfigError("num_vehicles must be >= 0")
        if self.physics_step <= 0.0 or self.decision_interval < self.physics_step:
            raise ConfigError("decision_interval must be a positive multiple of physics_step")
        if self.slot_length <= 2.0 * self.idm.min_gap + 5.0:
            raise ConfigError("slot_length too short for a vehicle")

    @property
    def substeps(self) -> int:
        return int(round(self.decision_interval / self.physics_step))


def r_speed(vehicle: Vehicle) -> float:
    """1 - |v - v_desired| / v_desired"""
    return 1.0 - abs(vehicle.velocity - vehicle.desired_velocity) / vehicle.desired_velocity


def generate_scenario(num_vehicles: int, num_lanes: int, rng=None, config: EnvConfig | None = None) -> HighwayState:
    """random ring-road scenario

    Vehicles (ego included) occupy distinct slots of ``slot_length`` meters with a random
    offset inside the slot, so same-lane gaps are always positive. Desired velocities are
    uniform in [min_desired_velocity, max_desired_velocity]; every vehicle starts at
    ``initial_speed_ratio`` of its desired velocity.

    Raises
    ------
    ConfigError
        if the road cannot hold ``num_vehicles + 1`` vehicles.
    """
    config = replace(config or EnvConfig(), num_vehicles=num_vehicles, num_lanes=num_lanes)
    rng = np.random.default_rng(rng)
    slots_per_lane = int(config.road_length // config.slot_length)
    if num_vehicles + 1 > slots_per_lane * num_lanes:
        raise ConfigError(
            f"{num_vehicles} vehicles do not fit on {num_lanes} lanes of {config.road_length} m "
            f"({slots_per_lane * num_lanes} slots)"
        )
    slots = rng.choice(slots_per_lane * num_lanes, size=num_vehicles + 1, replace=False)
    jitter = rng.uniform(0.0, config.slot_length - 2.0 * 5.0, size=num_vehicles + 1)
    desired = rng.uniform(config.min_desired_velocity, config.max_desired_velocity, size=num_vehicles + 1)
    desired[0] = config.ego_desired_velocity
    vehicles = []
    for i, (slot, offset, v_des) in enumerate(zip(slots, jitter, desired)):
        lane, index = divmod(int(slot), slots_per_lane)
        position = index * config.slot_length + offset
        vehicles.append(Vehicle(i, float(position), float(config.initial_speed_ratio * v_des), float(v_des), lane))
    return _observe(vehicles[0], vehicles[1:], config)


def _observe(ego: Vehicle, traffic, config: EnvConfig) -> HighwayState:
    return HighwayState.sense(
        ego, traffic, config.num_lanes, config.decision_interval, config.road_length, config.sensor_range
    )


def _leader_gaps(positions, lanes, lengths, road_length: float):
    """index of and bumper gap to the leader of every vehicle (-1, inf without leader)"""
    n = len(positions)
    leader = np.full(n, -1)
    gap = np.full(n, np.inf)
    for lane in np.unique(lanes):
        members = np.flatnonzero(lanes == lane)
        if members.size < 2:
            continue
        order = members[np.argsort(positions[members], kind="stable")]
        ahead = np.roll(order, -1)
        leader[order] = ahead
        gap[order] = (positions[ahead] - positions[order]) % road_length - lengths[ahead]
    return leader, gap


def _ego_collided(leader, gap) -> bool:
    """ego closed a gap, either behind its leader or in front of its follower"""
    return bool(gap[0] <= 0.0) or bool(np.any((leader == 0) & (gap <= 0.0)))


def highway_step(
    state: HighwayState,
    action,
    rng=None,
    config: EnvConfig | None = None,
    constraint_params: HighwayConstraintParams | None = None,
):
    """advance the highway by one decision interval

    The ego lane changes instantaneously (clamped to the road, flagged in ``info``), then all
    vehicles follow the IDM for ``decision_interval`` seconds. The dynamics are deterministic;
    ``rng`` is accepted for interface symmetry with stochastic environments.

    Parameters
    ----------
    state : :class:`~cqlearn.envs.traffic.HighwayState`
    action : :class:`~cqlearn.envs.traffic.HighwayAction` or int
    rng : numpy.random.Generator, optional
    config : :class:`EnvConfig`, optional
        defaults to a config matching ``state``.
    constraint_params : :class:`~cqlearn.highway_constraints.HighwayConstraintParams`, optional

    Returns
    -------
    next_state : :class:`~cqlearn.envs.traffic.HighwayState`
    reward : float
        r_speed of the ego in the next state.
    info : dict
        raw constraint signals of (state, action) (``c_safe``, ``c_lane``, ``c_r``, ``c_l``),
        the comfort signals ``j_lane_change`` and ``j_velocity_gain``, ``collision``,
        ``lane_violation`` and ``speed``.
    """
    if config is None:
        config = EnvConfig(
            num_lanes=state.num_lanes,
            road_length=state.road_length,
            decision_interval=state.decision_interval,
            sensor_range=state.sensor_range,
        )
    constraint_params = constraint_params or HighwayConstraintParams()
    action = HighwayAction(action)
    signals = signal_table(state, constraint_params)
    info = {name: float(signals[name][action]) for name in ("c_safe", "c_lane", "c_r", "c_l")}

    ego = state.ego
    lane = ego.lane + action.lane_delta
    info["lane_violation"] = not 0 <= lane < state.num_lanes
    lane = int(np.clip(lane, 0, state.num_lanes - 1))
    info["j_lane_change"] = float(lane != ego.lane)

    vehicles = [replace(ego, lane=lane), *state.traffic]
    positions = np.array([v.position for v in vehicles])
    velocities = np.array([v.velocity for v in vehicles])
    desired = np.array([v.desired_velocity for v in vehicles])
    lanes = np.array([v.lane for v in vehicles])
    lengths = np.array([v.length for v in vehicles])
    dt = config.physics_step
    collision = False
    for _ in range(config.substeps):
        leader, gap = _leader_gaps(positions, lanes, lengths, state.road_length)
        leader_velocity = np.where(leader >= 0, velocities[np.maximum(leader, 0)], 0.0)
        acc = idm_acceleration_array(velocities, desired, gap, leader_velocity, config.idm)
        collision |= _ego_collided(leader, gap)
        new_velocities = np.maximum(velocities + acc * dt, 0.0)
        positions = (positions + 0.5 * (velocities + new_velocities) * dt) % state.road_length
        velocities = new_velocities
    # final positions
    collision |= _ego_collided(*_leader_gaps(positions, lanes, lengths, state.road_length))

    moved = [
        replace(v, position=float(x), velocity=float(u)) for v, x, u in zip(vehicles, positions, velocities)
    ]
    next_state = _observe(moved[0], moved[1:], config)
    info["j_velocity_gain"] = next_state.ego.velocity - ego.velocity
    info["collision"] = collision
    info["speed"] = next_state.ego.velocity
    return next_state, r_speed(next_state.ego), info


@dataclass
class StepRecord:
    """one recorded decision step"""

    step: int
    state: HighwayState
    action: int
    reward: float
    info: dict


@dataclass
class EpisodeRecord:
    episode: int
    steps: list = field(default_factory=list)

    @property
    def lane_changes(self) -> np.ndarray:
        return np.array([r.info["j_lane_change"] for r in self.steps])


class HighwayEnv:
    """stateful highway environment over :func:`highway_step` and :func:`generate_scenario`

    Parameters
    ----------
    config : :class:`EnvConfig`
    constraint_params : :class:`~cqlearn.highway_constraints.HighwayConstraintParams`
    record : bool
        keep :class:`EpisodeRecord` objects in ``episodes``.
    """

    def __init__(self, config: EnvConfig | None = None, constraint_params=None, record: bool = False):
        self.config = config or EnvConfig()
        self.constraint_params = constraint_params or HighwayConstraintParams()
        self.record = record
        self.episodes = []
        self.state = None
        self.t = 0
        self.rng = np.random.default_rng()

    def reset(self, rng=None, num_vehicles: int | None = None) -> HighwayState:
        """start a new episode; ``rng`` is a Generator or a seed"""
        self.rng = np.random.default_rng(rng)
        if num_vehicles is None:
            num_vehicles = self.config.num_vehicles
        self.state = generate_scenario(num_vehicles, self.config.num_lanes, self.rng, self.config)
        self.t = 0
        if self.record:
            self.episodes.append(EpisodeRecord(len(self.episodes)))
        return self.state

    def step(self, action):
        """apply ``action``; returns (next_state, reward, terminal, truncated, info)

        Episodes end by time limit only, so ``terminal`` is always False.
        """
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        next_state, reward, info = highway_step(self.state, action, self.rng, self.config, self.constraint_params)
        if self.record:
            self.episodes[-1].steps.append(StepRecord(self.t, self.state, int(action), reward, info))
        self.state = next_state
        self.t += 1
        return next_state, reward, False, self.t >= self.config.episode_steps, info


def export_transition_chains(episodes, path=None, half_width: int = 2) -> pd.DataFrame:
    """chains of ``2 * half_width + 1`` decision steps centred on every ego lane change

    Only chains that lie completely inside their episode are exported. Columns are
    ``chain_id, episode, step, t, ego_lane, ego_v, ego_v_des, action, reward``, the step
    signals, ``n_neighbors`` and the flattened neighbor features ``dx_i, dv_i, dlane_i``
    (NaN-padded to the largest neighbor count).

    Parameters
    ----------
    episodes : list of :class:`EpisodeRecord`
    path : str or path-like, optional
        CSV destination.

    Returns
    -------
    chains : pandas.DataFrame
    """
    rows = []
    chain_id = 0
    skipped = 0
    for episode in episodes:
        steps = episode.steps
        for t, record in enumerate(steps):
            if not record.info["j_lane_change"]:
                continue
            if t - half_width < 0 or t + half_width >= len(steps):
                skipped += 1
                continue
            for offset in range(-half_width, half_width + 1):
                rows.append(_chain_row(chain_id, episode.episode, offset, steps[t + offset]))
            chain_id += 1
    if skipped:
        logger.warning("skipped %d lane changes too close to an episode boundary", skipped)
    width = max((row["n_neighbors"] for row in rows), default=0)
    feature_columns = [f"{name}_{i}" for i in range(width) for name in ("dx", "dv", "dlane")]
    columns = ["chain_id", "episode", "step", "t", "ego_lane", "ego_v", "ego_v_des", "action", "reward"]
    columns += [*STEP_SIGNALS, "n_neighbors", *feature_columns]
    chains = pd.DataFrame(rows, columns=columns)
    if path is not None:
        chains.to_csv(path, index=False)
    return chains


def _chain_row(chain_id: int, episode: int, offset: int, record: StepRecord) -> dict:
    ego = record.state.ego
    features = record.state.neighbor_features()
    row = {
        "chain_id": chain_id,
        "episode": episode,
        "step": offset,
        "t": record.step,
        "ego_lane": ego.lane,
        "ego_v": ego.velocity,
        "ego_v_des": ego.desired_velocity,
        "action": HighwayAction(record.action).name,
        "reward": record.reward,
        "n_neighbors": len(features),
    }
    row.update({name: record.info[name] for name in STEP_SIGNALS})
    for i, (dx, dv, dlane) in enumerate(features):
        row[f"dx_{i}"], row[f"dv_{i}"], row[f"dlane_{i}"] = dx, dv, dlane
    return row
