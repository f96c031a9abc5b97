"""Tidy plot data from experiment CSVs"""
from __future__ import annotations

import logging

import numpy as np
import pandas as pd

from cqlearn.errors import ConfigError

logger = logging.getLogger(__name__)

PLOT_COLUMNS = [
    "kind",
    "config_hash",
    "method",
    "branches",
    "weights",
    "mean_samples",
    "ci",
    "mean_speed",
    "violations",
]


def _sweep_rows(frame: pd.DataFrame) -> pd.DataFrame:
    grouped = frame.groupby(["config_hash", "algorithm", "branches"], sort=True)["samples"]
    stats = grouped.agg(["mean", "std", "count"]).reset_index()
    sem = stats["std"].fillna(0.0) / np.sqrt(stats["count"])
    return pd.DataFrame(
        {
            "kind": "tree_sweep",
            "config_hash": stats["config_hash"],
            "method": stats["algorithm"],
            "branches": stats["branches"],
            "mean_samples": stats["mean"],
            "ci": 1.96 * sem,
        }
    )


def _search_rows(frame: pd.DataFrame) -> pd.DataFrame:
    names = sorted(c for c in frame.columns if c.startswith("lambda_"))
    weights = frame[names].apply(lambda row: ";".join(f"{k}={row[k]:.6g}" for k in names), axis=1)
    return pd.DataFrame(
        {
            "kind": "search",
            "config_hash": frame["config_hash"],
            "method": frame["method"],
            "weights": weights if len(frame) else pd.Series(dtype=str),
            "mean_speed": frame["mean_speed"],
            "violations": frame["violations"],
        }
    )


def tidy_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """rows in ``PLOT_COLUMNS`` layout from a sweep-runs or a search-results frame"""
    if frame.empty:
        return pd.DataFrame(columns=PLOT_COLUMNS)
    columns = set(frame.columns)
    if {"branches", "algorithm", "samples"} <= columns:
        rows = _sweep_rows(frame)
    elif {"method", "mean_speed", "violations"} <= columns:
        rows = _search_rows(frame)
    else:
        raise ConfigError(f"cannot derive plot data from columns {sorted(columns)}")
    return rows.reindex(columns=PLOT_COLUMNS)


def emit_plot_data(paths, out_path=None) -> pd.DataFrame:
    """concatenate the tidy form of every CSV in ``paths``

    Parameters
    ----------
    paths : list of path-like
        tree-sweep run CSVs and random-search result CSVs, in any mix.
    out_path : path-like, optional
        CSV destination. An empty input list writes the header only.

    Returns
    -------
    data : pandas.DataFrame
        columns ``PLOT_COLUMNS``, rows in input order.
    """
    parts = []
    for path in paths:
        try:
            frame = pd.read_csv(path)
        except pd.errors.EmptyDataError:
            logger.warning("skipping empty file %s", path)
            continue
        parts.append(tidy_frame(frame))
    data = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=PLOT_COLUMNS)
    data = data.reindex(columns=PLOT_COLUMNS)
    if out_path is not None:
        data.to_csv(out_path, index=False)
    return data
