"""Random search over penalty weights and trade-off statistics"""
from __future__ import annotations

import logging

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

logger = logging.getLogger(__name__)


def sample_search_space(space, rng=None) -> list[dict]:
    """``space.n_samples`` weight vectors drawn log-uniformly from ``space.bounds()``

    Weights are drawn in sorted name order so the same seed gives the same vectors
    regardless of how the ranges were written.
    """
    rng = np.random.default_rng(rng)
    bounds = space.bounds()
    samples = []
    for _ in range(space.n_samples):
        weights = {}
        for name in sorted(bounds):
            low, high = bounds[name]
            weights[name] = float(np.exp(rng.uniform(np.log(low), np.log(high))))
        samples.append(weights)
    return samples


def select_incumbent(results: pd.DataFrame, violation_column: str = "violations"):
    """row with the fewest violations among configurations that did not collapse

    A configuration collapsed when its evaluated policy never changed lanes. Ties are broken
    by higher speed, then by the lower sample index.

    Returns
    -------
    incumbent : pandas.Series or None
        None when every configuration collapsed.
    """
    candidates = results[~results["collapsed"].astype(bool)]
    if candidates.empty:
        logger.warning("every sampled configuration collapsed to keeping the lane; no incumbent")
        return None
    ordered = candidates.sort_values([violation_column, "mean_speed", "sample"], ascending=[True, False, True])
    return ordered.iloc[0]


def permutation_test(x, y, n_permutations: int = 10_000, rng=None):
    """one-sided permutation test for a positive Spearman rank correlation

    Returns
    -------
    rho : float
        Spearman correlation of ``x`` and ``y`` (NaN for constant inputs).
    p_value : float
        fraction of permutations with a correlation at least ``rho``, with the usual +1
        correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3 or np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return float("nan"), 1.0
    rng = np.random.default_rng(rng)
    rho = spearmanr(x, y).correlation
    # ranks are fixed under permutation, so correlate ranks directly
    rx = pd.Series(x).rank().to_numpy()
    ry = pd.Series(y).rank().to_numpy()
    rx = (rx - rx.mean()) / np.linalg.norm(rx - rx.mean())
    ry = (ry - ry.mean()) / np.linalg.norm(ry - ry.mean())
    hits = 0
    for _ in range(n_permutations):
        if rx @ rng.permutation(ry) >= rho - 1e-12:
            hits += 1
    return float(rho), (hits + 1) / (n_permutations + 1)
