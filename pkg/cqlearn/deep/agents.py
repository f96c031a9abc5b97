"""Fixed-batch deep Q-learning updates

Vanilla DQN, Constrained DQN (safe-set restricted bootstrap), CDQN with multi-step
constraints (joint Q and truncated J heads), and the reward-shaping and loss-penalty
baselines. Every update takes one gradient step on its loss followed by a Polyak update of
the target network, and returns the scalar loss.

"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from cqlearn.deep.features import encode_state
from cqlearn.deep.net import network_from_architecture
from cqlearn.deep.optim import TargetNetwork, make_optimizer
from cqlearn.errors import ConfigError, NumericalError
from cqlearn.mdp import ConstraintValueSource, resolve_masks_batch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Method(Enum):
    DQN = "dqn"
    CDQN = "cdqn"
    CDQN_MSC = "cdqn_msc"
    REWARD_SHAPING = "reward_shaping"
    LOSS_PENALTY = "loss_penalty"


def _rows(batch):
    return np.arange(len(batch))


def _j_heads(out, constraints) -> dict:
    """J_H of every multi-step constraint from network outputs, shape (batch, n_actions)"""
    horizon = out.shape[2] - 1
    if horizon == 0:
        return {}
    return {c.name: out[:, :, min(c.horizon, horizon)] for c in constraints if c.is_multi_step}


def batch_safe_sets(constraints, signals: dict, n_rows: int, n_actions: int, j_values=None, j_ready=True):
    """resolved safe sets of a batch of states, shape (n_rows, n_actions)

    Single-step constraints read the stored per-action signal tables under their name;
    multi-step constraints read ``j_values`` and are skipped while ``j_ready`` is False.
    """
    masks, priorities = [], []
    for c in constraints:
        if c.is_multi_step:
            if not j_ready or not j_values:
                continue
            table = j_values.get(c.name)
        else:
            table = signals.get(c.name)
        if table is None:
            raise ConfigError(f"no values for constraint {c.name!r} in the batch")
        masks.append(c.mask(table))
        priorities.append(c.priority)
    if not masks:
        return np.ones((n_rows, n_actions), dtype=bool)
    return resolve_masks_batch(masks, priorities, n_actions)


def _td_targets(target, batch, gamma: float, rewards=None, mask=None) -> np.ndarray:
    q_next = target(batch.next_obs)[:, :, 0]
    if mask is not None:
        q_next = np.where(mask, q_next, -np.inf)
    rewards = batch.rewards if rewards is None else rewards
    return rewards + np.where(batch.terminals, 0.0, gamma * q_next.max(axis=1))


def _j_targets(target_next, batch, a_next, j) -> np.ndarray:
    """y_1 = j_t and y_h = j_t + J'_{h-1}(s', a_next); terminal successors give j_t"""
    horizon = target_next.shape[2] - 1
    y = np.repeat(np.asarray(j, dtype=float)[:, None], horizon, axis=1)
    follow = target_next[_rows(batch), a_next, 1:horizon]
    y[:, 1:] += np.where(batch.terminals[:, None], 0.0, follow)
    return y


def _fit(net, target, batch, q_targets, optimizer, j_targets=None, penalty=None) -> float:
    out, cache = net.forward(batch.obs)
    n = len(batch)
    rows, actions = _rows(batch), batch.actions
    q_sa = out[rows, actions, 0]
    diff = q_sa - q_targets
    loss = np.mean(diff**2)
    d_out = np.zeros_like(out)
    np.add.at(d_out, (rows, actions, 0), 2.0 * diff / n)
    if penalty is not None:
        loss += np.mean(penalty * q_sa**2)
        np.add.at(d_out, (rows, actions, 0), 2.0 * penalty * q_sa / n)
    if j_targets is not None:
        dj = out[rows, actions, 1:] - j_targets
        loss += np.sum(dj**2) / n
        for h in range(dj.shape[1]):
            np.add.at(d_out, (rows, actions, h + 1), 2.0 * dj[:, h] / n)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    optimizer.step(net.backward(cache, d_out))
    target.update(net)
    return float(loss)


def dqn_update(net, target, batch, optimizer, gamma: float = 0.99) -> float:
    """vanilla DQN: y = r + gamma max_a Q'(s', a)"""
    return _fit(net, target, batch, _td_targets(target, batch, gamma), optimizer)


def cdqn_update(net, target, batch, constraints, optimizer, gamma: float = 0.99, j_ready: bool = True) -> float:
    """Constrained DQN: y = r + gamma max over S_C(s') of Q'(s', a)

    Single-step safe sets come from the stored signals of s'; multi-step constraints read the
    online J heads at s' once ``j_ready``.
    """
    j_values = _j_heads(net(batch.next_obs), constraints) if any(c.is_multi_step for c in constraints) else None
    mask = batch_safe_sets(constraints, batch.next_signals, len(batch), net.n_actions, j_values, j_ready)
    return _fit(net, target, batch, _td_targets(target, batch, gamma, mask=mask), optimizer)


def msc_update(
    net, target, batch, constraints, optimizer, gamma: float = 0.99, j_key: str = "j_lane_change", j_ready=True
) -> float:
    """CDQN with multi-step constraints: joint step on the Q loss and every J-head loss

    The J targets follow the constrained-greedy action of the online Q network at s' and read
    J'_{h-1} from the target network.
    """
    if net.horizon < 1:
        raise ConfigError("multi-step constraint training needs a network with J heads")
    online_next = net(batch.next_obs)
    mask = batch_safe_sets(
        constraints, batch.next_signals, len(batch), net.n_actions, _j_heads(online_next, constraints), j_ready
    )
    a_next = np.argmax(np.where(mask, online_next[:, :, 0], -np.inf), axis=1)
    target_next = target(batch.next_obs)
    q_next = np.where(mask, target_next[:, :, 0], -np.inf).max(axis=1)
    q_targets = batch.rewards + np.where(batch.terminals, 0.0, gamma * q_next)
    j_targets = _j_targets(target_next, batch, a_next, batch.j[j_key])
    return _fit(net, target, batch, q_targets, optimizer, j_targets=j_targets)


def shaped_rewards(batch, lambda_lc: float, lambda_kr: float) -> np.ndarray:
    """r_speed - lambda_LC p_LC - lambda_KR p_KR with p_LC the lane-change flag, p_KR the lane index"""
    return batch.rewards - lambda_lc * batch.lane_change - lambda_kr * batch.lane


def reward_shaping_update(net, target, batch, lambda_lc: float, lambda_kr: float, optimizer, gamma=0.99) -> float:
    """vanilla DQN update on the shaped reward"""
    targets = _td_targets(target, batch, gamma, rewards=shaped_rewards(batch, lambda_lc, lambda_kr))
    return _fit(net, target, batch, targets, optimizer)


def violation_indicators(net, batch, constraints=(), j_ready: bool = True) -> dict:
    """1[a_i not in S(s_i)] for safety, keep-right and the multi-step comfort constraint"""
    rows, actions = _rows(batch), batch.actions
    indicators = {
        "safety": batch.signals["safety"][rows, actions] > 0.0,
        "keep_right": batch.signals["keep_right"][rows, actions] > 0.0,
        "comfort": np.zeros(len(batch), dtype=bool),
    }
    multi = [c for c in constraints if c.is_multi_step]
    if multi and j_ready and net.horizon > 0:
        j_values = _j_heads(net(batch.obs), multi)
        for c in multi:
            indicators["comfort"] |= ~c.mask(j_values[c.name])[rows, actions]
    return indicators


def loss_penalty_update(
    net,
    target,
    batch,
    lambda_safe: float,
    lambda_kr: float,
    lambda_comfort: float,
    optimizer,
    gamma: float = 0.99,
    constraints=(),
    j_key: str | None = None,
    j_ready: bool = True,
) -> float:
    """DQN loss plus (lambda_safe 1_safe + lambda_KR 1_KR + lambda_comfort 1_comfort) Q(s_i, a_i)^2

    The bootstrap max is unconstrained. With ``j_key`` and J heads, the J heads are trained
    alongside (greedy next action) to provide the comfort indicator.
    """
    ind = violation_indicators(net, batch, constraints, j_ready)
    penalty = lambda_safe * ind["safety"] + lambda_kr * ind["keep_right"] + lambda_comfort * ind["comfort"]
    j_targets = None
    if j_key is not None and net.horizon > 0:
        a_next = np.argmax(net(batch.next_obs)[:, :, 0], axis=1)
        j_targets = _j_targets(target(batch.next_obs), batch, a_next, batch.j[j_key])
    targets = _td_targets(target, batch, gamma)
    return _fit(net, target, batch, targets, optimizer, j_targets=j_targets, penalty=penalty)


class NetworkValueSource(ConstraintValueSource):
    """J heads of a network as constraint values, disabled until ``updates >= warmup``"""

    def __init__(self, net, encoder=encode_state, warmup: int = 0, updates: int = 0):
        self.net = net
        self.encoder = encoder
        self.warmup = warmup
        self.updates = updates

    def values(self, constraint, state):
        if self.net.horizon < 1:
            raise ConfigError(f"network has no J heads for constraint {constraint.name!r}")
        return self.net(self.encoder(state))[0, :, min(constraint.horizon, self.net.horizon)]

    def ready(self, constraint):
        return self.updates >= self.warmup


def network_q_function(net, encoder=encode_state):
    """state -> per-action Q values of ``net``"""

    def q_function(state):
        return net(encoder(state))[0, :, 0]

    return q_function


@dataclass
class TrainingRun:
    net: object
    target: TargetNetwork
    log: pd.DataFrame
    checksum: str
    steps: int


def train_fixed_batch(
    method,
    buffer,
    net,
    constraints=(),
    steps: int = 1000,
    batch_size: int = 64,
    lr: float = 1e-4,
    tau: float = 1e-3,
    gamma: float = 0.99,
    optimizer: str = "adam",
    weights: dict | None = None,
    j_key: str = "j_lane_change",
    warmup: int = 1000,
    rng=None,
    log_every: int = 100,
    callback=None,
    checkpoint_path=None,
    config_hash: str = "",
) -> TrainingRun:
    """train ``net`` on a frozen buffer with the selected method

    Parameters
    ----------
    method : :class:`Method` or str
    buffer : :class:`~cqlearn.deep.replay.ReplayBuffer`
    net : :class:`~cqlearn.deep.net.Network`
    constraints : list of :class:`~cqlearn.mdp.ConstraintSpec`
        constraint stack used by the constrained methods and the loss penalty.
    weights : dict, optional
        ``lambda_lc``, ``lambda_kr`` for reward shaping; ``lambda_safe``, ``lambda_kr``,
        ``lambda_comfort`` for the loss penalty.
    warmup : int
        gradient steps before multi-step constraints are enforced.
    callback : callable, optional
        ``callback(step, net)`` every ``log_every`` steps, returning a dict merged into the log.
    checkpoint_path : path-like, optional
        written at the end, or with the last finite parameters when the loss diverges.

    Raises
    ------
    NumericalError
        on a non-finite loss.
    RuntimeError
        if the buffer changed during training.
    """
    method = Method(method)
    weights = dict(weights or {})
    rng = np.random.default_rng(rng)
    checksum = buffer.checksum()
    target = TargetNetwork(net, tau)
    opt = make_optimizer(optimizer, net.params, lr)
    rows = []
    step = 0
    last_finite, last_finite_step = _finite_params(net), 0
    try:
        for step in range(1, steps + 1):
            batch = buffer.sample(batch_size, rng)
            j_ready = step > warmup
            if method is Method.DQN:
                loss = dqn_update(net, target, batch, opt, gamma)
            elif method is Method.CDQN:
                loss = cdqn_update(net, target, batch, constraints, opt, gamma, j_ready)
            elif method is Method.CDQN_MSC:
                loss = msc_update(net, target, batch, constraints, opt, gamma, j_key, j_ready)
            elif method is Method.REWARD_SHAPING:
                loss = reward_shaping_update(
                    net, target, batch, weights.get("lambda_lc", 0.0), weights.get("lambda_kr", 0.0), opt, gamma
                )
            else:
                loss = loss_penalty_update(
                    net,
                    target,
                    batch,
                    weights.get("lambda_safe", 0.0),
                    weights.get("lambda_kr", 0.0),
                    weights.get("lambda_comfort", 0.0),
                    opt,
                    gamma,
                    constraints,
                    j_key if net.horizon > 0 else None,
                    j_ready,
                )
            if step % log_every == 0 or step == steps:
                row = {"step": step, "loss": loss}
                if callback is not None:
                    row.update(callback(step, net) or {})
                rows.append(row)
                logger.debug("%s step %d loss %.6g", method.value, step, loss)
            params = _finite_params(net)
            if params is not None:
                last_finite, last_finite_step = params, step
    except NumericalError:
        logger.error("%s diverged at step %d", method.value, step)
        if checkpoint_path is not None and last_finite is not None:
            restored = net.copy()
            restored.params = last_finite
            save_checkpoint(checkpoint_path, restored, config_hash, last_finite_step)
        raise
    if buffer.checksum() != checksum:
        raise RuntimeError("fixed batch was modified during training")
    if net.horizon > 0 and j_key in buffer.j and len(buffer):
        signal = buffer.j[j_key]
        check_j_bounds(net, buffer.sample(batch_size, rng).obs, min(signal.min(), 0.0), max(signal.max(), 0.0))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, config_hash, steps)
    return TrainingRun(net, target, pd.DataFrame(rows, columns=None if rows else ["step", "loss"]), checksum, steps)


def _finite_params(net):
    """copy of the parameters, or None if any entry is non-finite"""
    if not all(np.isfinite(v).all() for v in net.params.values()):
        return None
    return {k: v.copy() for k, v in net.params.items()}


def check_j_bounds(net, obs, j_min: float, j_max: float, tolerance: float = 0.1) -> float:
    """fraction of J_h predictions outside [h j_min, h j_max] by more than ``tolerance`` of the range"""
    out = net(obs)
    if net.horizon < 1:
        return 0.0
    h = np.arange(1, net.horizon + 1)
    low, high = h * j_min, h * j_max
    slack = tolerance * np.maximum(high - low, 1e-12)
    j = out[:, :, 1:]
    outside = (j < low - slack) | (j > high + slack)
    fraction = float(outside.mean())
    if fraction > 0.0:
        logger.warning("%.2f%% of J predictions leave their admissible range", 100.0 * fraction)
    return fraction


def save_checkpoint(path, net, config_hash: str = "", step: int = 0):
    """versioned ``.npz`` with the parameters, the architecture and the config hash"""
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    np.savez(
        path,
        format_version=np.array(CHECKPOINT_VERSION),
        config_hash=np.array(config_hash),
        step=np.array(step),
        architecture=np.array(json.dumps(net.architecture(), sort_keys=True)),
        **arrays,
    )


def load_checkpoint(path):
    """restore a network from :func:`save_checkpoint`

    Returns
    -------
    net : :class:`~cqlearn.deep.net.Network`
    meta : dict
        ``format_version``, ``config_hash`` and ``step``.
    """
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {version}")
        net = network_from_architecture(json.loads(str(data["architecture"])))
        net.params = {k.split("/", 1)[1]: data[k].copy() for k in data.files if k.startswith("param/")}
        meta = {"format_version": version, "config_hash": str(data["config_hash"]), "step": int(data["step"])}
    return net, meta
