"""Traffic types for the highway environment

Lane 0 is the rightmost lane; a left lane change increases the lane index. Positions live on
a ring road, so relative positions are wrapped into [-road_length / 2, road_length / 2).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class HighwayAction(IntEnum):
    KEEP_LANE = 0
    LEFT = 1
    RIGHT = 2

    @property
    def lane_delta(self) -> int:
        return {HighwayAction.KEEP_LANE: 0, HighwayAction.LEFT: 1, HighwayAction.RIGHT: -1}[self]

    @property
    def is_lane_change(self) -> bool:
        return self is not HighwayAction.KEEP_LANE


N_ACTIONS = len(HighwayAction)


@dataclass(frozen=True)
class Vehicle:
    """a vehicle on the ring road

    Attributes
    ----------
    id : int
    position : float
        front bumper position in meters.
    velocity : float
        m/s, non-negative.
    desired_velocity : float
        m/s.
    lane : int
        0 is the rightmost lane.
    length : float
        meters.
    """

    id: int
    position: float
    velocity: float
    desired_velocity: float
    lane: int
    length: float = 5.0

    def __post_init__(self):
        if self.velocity < 0.0:
            raise ValueError(f"vehicle {self.id} has negative velocity {self.velocity}")


def ring_offset(position, reference, road_length: float):
    """signed distance from ``reference`` to ``position`` on a ring, in [-L/2, L/2)"""
    return (np.asarray(position) - reference + road_length / 2.0) % road_length - road_length / 2.0


@dataclass(frozen=True)
class HighwayState:
    """ego vehicle plus the surrounding vehicles within sensor range

    ``traffic`` holds every other vehicle on the road and drives the dynamics; ``others`` is
    the sensed subset within ``sensor_range`` that features and constraints read.
    """

    ego: Vehicle
    others: tuple = ()
    num_lanes: int = 3
    decision_interval: float = 2.0
    road_length: float = 1000.0
    sensor_range: float = 100.0
    traffic: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not 0 <= self.ego.lane < self.num_lanes:
            raise ValueError(f"ego lane {self.ego.lane} outside [0, {self.num_lanes})")

    @classmethod
    def sense(cls, ego: Vehicle, traffic, num_lanes: int, decision_interval: float, road_length: float, sensor_range):
        """state whose ``others`` are the vehicles of ``traffic`` within sensor range of ``ego``"""
        traffic = tuple(traffic)
        others = tuple(
            v for v in traffic if abs(ring_offset(v.position, ego.position, road_length)) <= sensor_range
        )
        return cls(ego, others, num_lanes, decision_interval, road_length, sensor_range, traffic)

    def relative(self, vehicle: Vehicle) -> tuple[float, float, int]:
        """(dx, dv, dlane) of ``vehicle`` with respect to the ego"""
        dx = float(ring_offset(vehicle.position, self.ego.position, self.road_length))
        return dx, vehicle.velocity - self.ego.velocity, vehicle.lane - self.ego.lane

    def neighbor_features(self) -> np.ndarray:
        """raw relative features of the sensed vehicles, shape (n_others, 3)"""
        if not self.others:
            return np.zeros((0, 3))
        return np.array([self.relative(v) for v in self.others], dtype=float)

    def on_lane(self, lane: int) -> list[Vehicle]:
        return [v for v in self.others if v.lane == lane]
