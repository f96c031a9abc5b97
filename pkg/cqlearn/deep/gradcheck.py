"""Central finite-difference check of network gradients"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    errors: dict = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_checked > 0 and self.max_rel_error <= tol


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a| + |n|, floor) elementwise"""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def gradient_check(net, obs, eps: float = 1e-5, rng=None, max_elements: int | None = None) -> GradCheckResult:
    """compare :meth:`backward` against central differences of a random linear loss

    The loss is sum(out * G) for a fixed random G. Elements whose perturbation flips a ReLU
    (a kink between the +eps and -eps evaluations) are skipped.

    Parameters
    ----------
    net : :class:`~cqlearn.deep.net.Network`
    obs : dict of numpy.ndarray
    eps : float
    rng : numpy.random.Generator or int, optional
    max_elements : int, optional
        check at most this many randomly chosen elements per parameter array.

    Returns
    -------
    result : :class:`GradCheckResult`
    """
    rng = np.random.default_rng(rng)
    out, cache = net.forward(obs)
    weights = rng.normal(size=out.shape)
    grads = net.backward(cache, weights)
    base_pattern = net.activation_pattern(obs)

    def loss():
        return float(np.sum(net(obs) * weights))

    errors = {}
    n_checked = n_skipped = 0
    for name, param in net.params.items():
        flat = param.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        errs = []
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus, plus_pattern = loss(), net.activation_pattern(obs)
            flat[i] = original - eps
            minus, minus_pattern = loss(), net.activation_pattern(obs)
            flat[i] = original
            if not (np.array_equal(plus_pattern, base_pattern) and np.array_equal(minus_pattern, base_pattern)):
                n_skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * eps)
            errs.append(float(relative_error(grads[name].reshape(-1)[i], numeric)))
            n_checked += 1
        errors[name] = max(errs, default=0.0)
    return GradCheckResult(max(errors.values(), default=0.0), n_checked, n_skipped, errors)
