"""Feedforward networks with manual reverse-mode gradients

Parameters live in an ordered dict of float64 arrays (``net.params``); :meth:`forward` returns
the output together with a cache that :meth:`backward` consumes to produce gradients with the
same keys. Inputs are dicts of batched arrays so that flat and set-structured nets share the
training code.

"""
from __future__ import annotations

import numpy as np


def relu(x):
    return np.maximum(x, 0.0)


class _Dense:
    """stack of fully connected layers, ReLU on every layer except optionally the last"""

    def __init__(self, prefix: str, sizes, rng, bias: bool = True, relu_last: bool = True, dtype=np.float64):
        self.prefix = prefix
        self.sizes = list(sizes)
        self.bias = bias
        self.relu_last = relu_last
        self.dtype = dtype
        self.rng = rng

    def init_params(self) -> dict:
        params = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            # fan-in scaled uniform
            bound = 1.0 / np.sqrt(max(n_in, 1))
            params[f"{self.prefix}.{i}.W"] = self.rng.uniform(-bound, bound, size=(n_in, n_out)).astype(self.dtype)
            if self.bias:
                params[f"{self.prefix}.{i}.b"] = self.rng.uniform(-bound, bound, size=n_out).astype(self.dtype)
        return params

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def _activated(self, i: int) -> bool:
        return i < self.n_layers - 1 or self.relu_last

    def forward(self, params, x):
        cache = []
        for i in range(self.n_layers):
            z = x @ params[f"{self.prefix}.{i}.W"]
            if self.bias:
                z = z + params[f"{self.prefix}.{i}.b"]
            cache.append((x, z))
            x = relu(z) if self._activated(i) else z
        return x, cache

    def backward(self, params, cache, dy, grads):
        for i in reversed(range(self.n_layers)):
            x, z = cache[i]
            dz = dy * (z > 0.0) if self._activated(i) else dy
            grads[f"{self.prefix}.{i}.W"] = x.reshape(-1, x.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            if self.bias:
                grads[f"{self.prefix}.{i}.b"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            dy = dz @ params[f"{self.prefix}.{i}.W"].T
        return dy

    def pattern(self, cache):
        return [z > 0.0 for i, (_, z) in enumerate(cache) if self._activated(i)]


class Network:
    """common interface of :class:`MlpNet` and :class:`MultiHeadNet`

    The output has shape (batch, n_actions, n_heads): head 0 is Q, heads 1..H are J_1..J_H.
    """

    n_actions: int
    horizon: int
    params: dict

    @property
    def n_heads(self) -> int:
        return 1 + self.horizon

    def forward(self, obs):
        raise NotImplementedError

    def backward(self, cache, d_out) -> dict:
        raise NotImplementedError

    def architecture(self) -> dict:
        raise NotImplementedError

    def __call__(self, obs) -> np.ndarray:
        return self.forward(obs)[0]

    def q_values(self, obs) -> np.ndarray:
        return self(obs)[:, :, 0]

    def j_values(self, obs, h: int) -> np.ndarray:
        """J_h of every action, shape (batch, n_actions)"""
        return self(obs)[:, :, h]

    def copy(self):
        clone = network_from_architecture(self.architecture())
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def activation_pattern(self, obs) -> np.ndarray:
        """flattened ReLU on/off pattern of a forward pass"""
        _, cache = self.forward(obs)
        return np.concatenate([p.ravel() for p in self._patterns(cache)] or [np.zeros(0, dtype=bool)])

    def _patterns(self, cache):
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


class MlpNet(Network):
    """flat-input network reading ``obs["x"]`` of shape (batch, input_dim)

    With ``hidden=()`` and ``bias=False`` the net is the linear map x @ W, which on one-hot
    state inputs stores one free parameter per (state, action, head).

    Parameters
    ----------
    input_dim : int
    n_actions : int
    horizon : int
        number of J heads per action.
    hidden : tuple of int
        hidden layer widths (ReLU).
    bias : bool
    rng : numpy.random.Generator or int, optional
    """

    def __init__(self, input_dim: int, n_actions: int, horizon: int = 0, hidden=(100, 100), bias=True, rng=None):
        self.input_dim = input_dim
        self.n_actions = n_actions
        self.horizon = horizon
        self.hidden = tuple(hidden)
        self.bias = bias
        rng = np.random.default_rng(rng)
        sizes = [input_dim, *self.hidden, n_actions * (1 + horizon)]
        self._body = _Dense("mlp", sizes, rng, bias=bias, relu_last=False)
        self.params = self._body.init_params()

    def forward(self, obs):
        x = np.asarray(obs["x"], dtype=np.float64)
        y, cache = self._body.forward(self.params, x)
        return y.reshape(len(x), self.n_actions, self.n_heads), cache

    def backward(self, cache, d_out):
        grads = {}
        self._body.backward(self.params, cache, d_out.reshape(len(d_out), -1), grads)
        return grads

    def _patterns(self, cache):
        return self._body.pattern(cache)

    def architecture(self):
        return {
            "kind": "mlp",
            "input_dim": self.input_dim,
            "n_actions": self.n_actions,
            "horizon": self.horizon,
            "hidden": list(self.hidden),
            "bias": self.bias,
        }


class MultiHeadNet(Network):
    """set-encoder network with joint Q and J heads

    Per-vehicle features go through phi, are sum-pooled over the (masked) vehicle set and
    decoded by rho; ego features are concatenated before the fully connected trunk. The
    output layer is linear with ``n_actions * (1 + horizon)`` units.

    Observations are dicts with ``vehicles`` (batch, max_vehicles, vehicle_dim), ``mask``
    (batch, max_vehicles) and ``ego`` (batch, ego_dim).
    """

    def __init__(
        self,
        n_actions: int = 3,
        horizon: int = 5,
        vehicle_dim: int = 3,
        ego_dim: int = 2,
        phi=(20, 80),
        rho=(80, 20),
        trunk=(100, 100),
        rng=None,
    ):
        self.n_actions = n_actions
        self.horizon = horizon
        self.vehicle_dim = vehicle_dim
        self.ego_dim = ego_dim
        self.widths = {"phi": tuple(phi), "rho": tuple(rho), "trunk": tuple(trunk)}
        rng = np.random.default_rng(rng)
        self._phi = _Dense("phi", [vehicle_dim, *phi], rng)
        self._rho = _Dense("rho", [phi[-1], *rho], rng)
        self._trunk = _Dense("trunk", [rho[-1] + ego_dim, *trunk, n_actions * (1 + horizon)], rng, relu_last=False)
        self.params = {**self._phi.init_params(), **self._rho.init_params(), **self._trunk.init_params()}

    def forward(self, obs):
        vehicles = np.asarray(obs["vehicles"], dtype=np.float64)
        mask = np.asarray(obs["mask"], dtype=np.float64)
        ego = np.asarray(obs["ego"], dtype=np.float64)
        encoded, phi_cache = self._phi.forward(self.params, vehicles)
        pooled = np.einsum("nmk,nm->nk", encoded, mask)
        decoded, rho_cache = self._rho.forward(self.params, pooled)
        joint = np.concatenate([decoded, ego], axis=1)
        y, trunk_cache = self._trunk.forward(self.params, joint)
        cache = (mask, phi_cache, rho_cache, trunk_cache)
        return y.reshape(len(ego), self.n_actions, self.n_heads), cache

    def backward(self, cache, d_out):
        mask, phi_cache, rho_cache, trunk_cache = cache
        grads = {}
        d_joint = self._trunk.backward(self.params, trunk_cache, d_out.reshape(len(d_out), -1), grads)
        d_decoded = d_joint[:, : self.widths["rho"][-1]]
        d_pooled = self._rho.backward(self.params, rho_cache, d_decoded, grads)
        d_encoded = d_pooled[:, None, :] * mask[:, :, None]
        self._phi.backward(self.params, phi_cache, d_encoded, grads)
        return grads

    def _patterns(self, cache):
        mask, phi_cache, rho_cache, trunk_cache = cache
        # padded vehicles do not influence the output
        phi = [p[mask > 0] for p in self._phi.pattern(phi_cache)]
        return phi + self._rho.pattern(rho_cache) + self._trunk.pattern(trunk_cache)

    def architecture(self):
        return {
            "kind": "multihead",
            "n_actions": self.n_actions,
            "horizon": self.horizon,
            "vehicle_dim": self.vehicle_dim,
            "ego_dim": self.ego_dim,
            "phi": list(self.widths["phi"]),
            "rho": list(self.widths["rho"]),
            "trunk": list(self.widths["trunk"]),
        }


def network_from_architecture(arch: dict) -> Network:
    """rebuild an (uninitialized-weights) network from :meth:`Network.architecture`"""
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "mlp":
        return MlpNet(arch["input_dim"], arch["n_actions"], arch["horizon"], tuple(arch["hidden"]), arch["bias"])
    if kind == "multihead":
        return MultiHeadNet(**{k: tuple(v) if isinstance(v, list) else v for k, v in arch.items()})
    raise ValueError(f"unknown network kind {kind!r}")
