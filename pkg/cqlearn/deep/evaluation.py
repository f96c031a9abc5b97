"""Policy evaluation on the highway"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from cqlearn.deep.agents import NetworkValueSource, network_q_function
from cqlearn.deep.features import encode_state
from cqlearn.highway_constraints import lane_changes_in_window
from cqlearn.mdp import GreedyPolicy

logger = logging.getLogger(__name__)


@dataclass
class EvaluationMetrics:
    """aggregate evaluation metrics

    Violations are reported per episode and per 1000 decision steps.
    """

    episodes: int
    steps: int
    mean_speed: float
    viol_safety: float
    viol_kr: float
    viol_comfort: float
    lane_changes: float
    max_lane_changes_window: int
    collisions: int
    viol_safety_per_1000: float
    viol_kr_per_1000: float
    viol_comfort_per_1000: float

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def satisfies_all(self) -> bool:
        return self.viol_safety == 0 and self.viol_kr == 0 and self.viol_comfort == 0 and self.collisions == 0


def comfort_violations_of_episode(lane_changes, velocity_gains, params) -> int:
    """comfort violations of one episode under the configured comfort variant

    LCmax counts sliding windows of ``horizon`` decisions with more than ``beta_lcmax`` lane
    changes. VGmin counts lane changes whose realized velocity gain over the next ``horizon``
    steps stays below ``beta_vgmin``.
    """
    lane_changes = np.asarray(lane_changes, dtype=float)
    if params.comfort == "lcmax":
        return int(np.sum(lane_changes_in_window(lane_changes, params.horizon) > params.beta_lcmax))
    if params.comfort == "vgmin":
        gains = np.asarray(velocity_gains, dtype=float)
        count = 0
        for t in np.flatnonzero(lane_changes):
            if gains[t : t + params.horizon].sum() < params.beta_vgmin:
                count += 1
        return count
    return 0


def greedy_network_policy(net, constraints=(), warmup_done: bool = True, encoder=encode_state):
    """constrained-greedy policy over the Q head; multi-step constraints read the J heads"""
    evaluator = NetworkValueSource(net, encoder, warmup=0 if warmup_done else 1)
    return GreedyPolicy(network_q_function(net, encoder), constraints, net.n_actions, evaluator)


def evaluate_policy(
    net,
    constraints,
    env,
    n_episodes: int = 100,
    use_spe: bool = True,
    rng=None,
    vehicle_counts=None,
    encoder=encode_state,
):
    """roll out a greedy (optionally safe-extracted) policy and aggregate metrics

    Parameters
    ----------
    net : :class:`~cqlearn.deep.net.Network` or callable
        a network (greedy over its Q head) or a ready policy ``state -> action``.
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
        applied at extraction when ``use_spe`` is set.
    env : :class:`~cqlearn.envs.highway.HighwayEnv`
    n_episodes : int
    use_spe : bool
        restrict the argmax to the safe set; off evaluates the raw greedy policy.
    rng : numpy.random.Generator or int, optional
    vehicle_counts : list of int, optional
        episode i uses ``vehicle_counts[i % len(vehicle_counts)]`` vehicles.

    Returns
    -------
    metrics : :class:`EvaluationMetrics`
    episodes : pandas.DataFrame
        one row per episode.
    """
    rng = np.random.default_rng(rng)
    if hasattr(net, "forward"):
        policy = greedy_network_policy(net, constraints if use_spe else (), encoder=encoder)
    else:
        policy = net
    params = env.constraint_params
    counts = vehicle_counts or [env.config.num_vehicles]
    rows = []
    max_window = 0
    for episode in range(n_episodes):
        num_vehicles = int(counts[episode % len(counts)])
        state = env.reset(rng, num_vehicles=num_vehicles)
        speeds, lane_changes, gains = [], [], []
        safety = kr = collisions = 0
        truncated = False
        while not truncated:
            state, _, _, truncated, info = env.step(policy(state))
            safety += int(info["c_safe"] + info["c_lane"] > 0.0)
            kr += int(info["c_r"] + info["c_l"] > 0.0)
            collisions += int(info["collision"])
            speeds.append(info["speed"])
            lane_changes.append(info["j_lane_change"])
            gains.append(info["j_velocity_gain"])
        windows = lane_changes_in_window(lane_changes, params.horizon)
        max_window = max(max_window, int(windows.max()) if windows.size else 0)
        rows.append(
            {
                "episode": episode,
                "num_vehicles": num_vehicles,
                "steps": len(speeds),
                "mean_speed": float(np.mean(speeds)),
                "viol_safety": safety,
                "viol_kr": kr,
                "viol_comfort": comfort_violations_of_episode(lane_changes, gains, params),
                "lane_changes": int(np.sum(lane_changes)),
                "collisions": collisions,
            }
        )
    episodes = pd.DataFrame(rows)
    total_steps = int(episodes["steps"].sum()) if rows else 0
    per_1000 = 1000.0 / max(total_steps, 1)
    metrics = EvaluationMetrics(
        episodes=n_episodes,
        steps=total_steps,
        mean_speed=float((episodes["mean_speed"] * episodes["steps"]).sum() / max(total_steps, 1)) if rows else 0.0,
        viol_safety=float(episodes["viol_safety"].mean()) if rows else 0.0,
        viol_kr=float(episodes["viol_kr"].mean()) if rows else 0.0,
        viol_comfort=float(episodes["viol_comfort"].mean()) if rows else 0.0,
        lane_changes=float(episodes["lane_changes"].mean()) if rows else 0.0,
        max_lane_changes_window=max_window,
        collisions=int(episodes["collisions"].sum()) if rows else 0,
        viol_safety_per_1000=float(episodes["viol_safety"].sum() * per_1000) if rows else 0.0,
        viol_kr_per_1000=float(episodes["viol_kr"].sum() * per_1000) if rows else 0.0,
        viol_comfort_per_1000=float(episodes["viol_comfort"].sum() * per_1000) if rows else 0.0,
    )
    logger.info(
        "evaluated %d episodes: speed %.2f m/s, violations safety %.3f kr %.3f comfort %.3f",
        n_episodes,
        metrics.mean_speed,
        metrics.viol_safety,
        metrics.viol_kr,
        metrics.viol_comfort,
    )
    return metrics, episodes
