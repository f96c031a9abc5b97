"""Experiment drivers

Every driver takes an :class:`~cqlearn.harness.config.ExperimentConfig`, writes its CSV
outputs into ``config.output_dir`` and returns the written frames. Each CSV row carries the
config hash and the seed it was produced with.

"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd

from cqlearn.deep.agents import Method, load_checkpoint, train_fixed_batch
from cqlearn.deep.evaluation import evaluate_policy
from cqlearn.deep.net import MultiHeadNet
from cqlearn.deep.replay import ReplayBuffer, collect_fixed_batch
from cqlearn.envs.highway import HighwayEnv, export_transition_chains
from cqlearn.envs.mdps import TreeMdpParams, build_fig3_mdp, build_tree_mdp
from cqlearn.envs.traffic import N_ACTIONS
from cqlearn.harness.config import apply_overrides, config_hash
from cqlearn.harness.search import permutation_test, sample_search_space, select_incumbent
from cqlearn.highway_constraints import build_constraint_stack
from cqlearn.mdp import extract_policy_spe
from cqlearn.planning import constrained_policy_iteration, initial_value, rollout_greedy
from cqlearn.tabular import Algorithm, TrainingSchedule, run_tabular_training

logger = logging.getLogger(__name__)


def run_parallel(fn, jobs, workers: int = 1) -> list:
    """``[fn(job) for job in jobs]`` on a process pool; results keep the order of ``jobs``"""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def output_path(config, name: str) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, name)


def write_frame(frame: pd.DataFrame, config, name: str) -> pd.DataFrame:
    """prepend the config hash column and write ``frame`` as CSV into the output directory"""
    frame = frame.copy()
    frame.insert(0, "config_hash", config_hash(config))
    frame.to_csv(output_path(config, name), index=False)
    return frame


def training_schedule(config) -> TrainingSchedule:
    tab = config.tabular
    return TrainingSchedule(
        max_episodes=tab.max_episodes,
        epsilon=tab.epsilon,
        alpha=tab.alpha,
        alpha_j=tab.alpha_j,
        patience=tab.patience,
        max_episode_steps=tab.max_episode_steps,
        q_init=tab.q_init,
        penalty=tab.penalty,
        exploration=tab.exploration,
    )


def run_fig3_demo(config, with_constraints: bool = True) -> pd.DataFrame:
    """returns of Q-learning, Safe Policy Extraction, Constrained Q-learning and CPI

    Q-learning is trained without constraints and followed greedily; SPE masks the same Q
    table at extraction. With the default settings the returns are +3, +1, +2 and +2.
    """
    mdp, constraints = build_fig3_mdp()
    if not with_constraints:
        constraints = []
    schedule = training_schedule(config)
    plain = run_tabular_training(mdp, Algorithm.Q_LEARNING, schedule, (), rng=config.seed)
    constrained = run_tabular_training(mdp, Algorithm.CONSTRAINED_Q, schedule, constraints, rng=config.seed)
    policies = {
        "q_learning": plain.policy,
        "spe": extract_policy_spe(plain.q, constraints),
        "constrained_q": constrained.policy,
        "cpi": constrained_policy_iteration(mdp, constraints).policy,
    }
    rows = []
    for method, policy in policies.items():
        total, final_state = rollout_greedy(mdp, policy)
        rows.append(
            {
                "seed": config.seed,
                "method": method,
                "return": total,
                "terminal_state": mdp.state_labels[final_state],
            }
        )
        logger.info("%-14s return %+.1f (reaches %s)", method, total, mdp.state_labels[final_state])
    return write_frame(pd.DataFrame(rows), config, "fig3.csv")


def _tree_job(job):
    config, branches, algorithm, seed = job
    tab = config.tabular
    mdp, constraints = build_tree_mdp(TreeMdpParams(branches, tail_length=tab.tail_length, gap_length=tab.gap_length))
    optimal = initial_value(mdp, constrained_policy_iteration(mdp, constraints).values)
    result = run_tabular_training(
        mdp,
        Algorithm(algorithm),
        training_schedule(config),
        constraints,
        rng=np.random.default_rng([config.seed, branches, seed]),
        seed=seed,
        optimal_value=optimal,
    )
    last = result.curve.iloc[-1]
    return {
        "branches": branches,
        "algorithm": algorithm,
        "seed": seed,
        "converged": result.converged,
        "episodes": result.converged_episode if result.converged else int(last["episode"]),
        "samples": result.converged_samples if result.converged else int(last["samples"]),
    }


def summarize_tree_sweep(runs: pd.DataFrame) -> pd.DataFrame:
    """mean and standard deviation per (B, algorithm) and the sample ratio CQL / RS per B

    Non-convergent seeds enter with the samples spent until the budget ran out.
    """
    grouped = runs.groupby(["branches", "algorithm"], sort=True)
    summary = grouped.agg(
        mean_samples=("samples", "mean"),
        std_samples=("samples", "std"),
        mean_episodes=("episodes", "mean"),
        n_seeds=("seed", "count"),
        n_converged=("converged", "sum"),
    ).reset_index()
    means = summary.pivot(index="branches", columns="algorithm", values="mean_samples")
    if {"constrained_q", "reward_shaped"} <= set(means.columns):
        ratio = (means["constrained_q"] / means["reward_shaped"]).rename("ratio")
        summary = summary.merge(ratio.reset_index(), on="branches", how="left")
    return summary


def run_tree_sweep(config):
    """samples to convergence of every (B, algorithm, seed); writes runs and summary CSVs"""
    jobs = [
        (config, int(branches), algorithm, seed)
        for branches in config.tabular.branches
        for algorithm in config.tabular.algorithms
        for seed in range(config.tabular.seeds)
    ]
    logger.info("tree sweep: %d runs on %d workers", len(jobs), config.workers)
    runs = pd.DataFrame(run_parallel(_tree_job, jobs, config.workers))
    summary = summarize_tree_sweep(runs)
    for row in summary.itertuples():
        logger.info("B=%d %-14s mean samples %.1f", row.branches, row.algorithm, row.mean_samples)
    return write_frame(runs, config, "tree_sweep_runs.csv"), write_frame(summary, config, "tree_sweep_summary.csv")


def comfort_key(config) -> str:
    """buffer key of the immediate signal of the configured comfort constraint"""
    return "j_velocity_gain" if config.constraints.comfort == "vgmin" else "j_lane_change"


def uses_j_heads(method) -> bool:
    return Method(method) in (Method.CDQN_MSC, Method.LOSS_PENALTY)


def build_network(config, rng=None) -> MultiHeadNet:
    deep = config.deep
    horizon = config.constraints.horizon if uses_j_heads(deep.method) else 0
    return MultiHeadNet(N_ACTIONS, horizon, phi=deep.phi, rho=deep.rho, trunk=deep.trunk, rng=rng)


def training_constraints(config) -> list:
    """constraints seen by the update rule of the configured method"""
    stack = build_constraint_stack(config.constraints)
    method = Method(config.deep.method)
    if method is Method.CDQN:
        return [c for c in stack if not c.is_multi_step]
    if method in (Method.CDQN_MSC, Method.LOSS_PENALTY):
        return stack
    return []


def evaluation_constraints(config, net) -> list:
    """constraints applied at extraction: the method's own for CDQN variants, SPE for baselines"""
    stack = build_constraint_stack(config.constraints)
    method = Method(config.deep.method)
    if method in (Method.CDQN, Method.CDQN_MSC):
        return training_constraints(config)
    if config.eval.spe == "none":
        return []
    if config.eval.spe == "safety":
        return [c for c in stack if c.name == "safety"]
    return [c for c in stack if not c.is_multi_step or net.horizon > 0]


def buffer_path(config, seed: int) -> str:
    return output_path(config, f"buffer_seed{seed}.npz")


def run_collect(config, seed: int | None = None, chains: bool = False) -> ReplayBuffer:
    """collect (and save) the fixed batch of ``seed``; optionally export lane-change chains"""
    seed = config.seed if seed is None else seed
    env = HighwayEnv(config.env, config.constraints, record=chains)
    buffer = collect_fixed_batch(
        env,
        config.deep.n_transitions,
        rng=np.random.default_rng([config.seed, seed, 0]),
        vehicle_counts=list(config.deep.collection_vehicle_counts),
    )
    buffer.save(buffer_path(config, seed))
    if chains:
        frame = export_transition_chains(env.episodes)
        frame.insert(0, "seed", seed)
        write_frame(frame, config, f"chains_seed{seed}.csv")
    return buffer


def ensure_buffer(config, seed: int) -> ReplayBuffer:
    path = buffer_path(config, seed)
    if os.path.exists(path):
        logger.info("loading fixed batch %s", path)
        return ReplayBuffer.load(path)
    return run_collect(config, seed)


def _evaluation_env(config) -> HighwayEnv:
    return HighwayEnv(config.env, config.constraints)


def evaluate_network(config, net, seed: int):
    return evaluate_policy(
        net,
        evaluation_constraints(config, net),
        _evaluation_env(config),
        n_episodes=config.eval.n_episodes,
        use_spe=True,
        rng=np.random.default_rng([config.seed, seed, 2]),
        vehicle_counts=list(config.eval.vehicle_counts),
    )


def train_and_evaluate(config, seed: int, buffer=None, checkpoint_path=None):
    """train the configured method on the fixed batch of ``seed`` and evaluate it

    Returns
    -------
    row : dict
        seed, method, weights and the :class:`~cqlearn.deep.evaluation.EvaluationMetrics`.
    log : pandas.DataFrame
        training log.
    """
    deep = config.deep
    buffer = ensure_buffer(config, seed) if buffer is None else buffer
    net = build_network(config, rng=np.random.default_rng([config.seed, seed, 1]))

    callback = None
    if deep.eval_every > 0:

        def callback(step, net):
            if step % deep.eval_every:
                return {}
            metrics, _ = evaluate_network(config, net, seed)
            return {f"eval_{k}": v for k, v in metrics.to_dict().items()}

    run = train_fixed_batch(
        deep.method,
        buffer,
        net,
        training_constraints(config),
        steps=deep.steps,
        batch_size=deep.batch_size,
        lr=deep.lr,
        tau=deep.tau,
        gamma=deep.gamma,
        optimizer=deep.optimizer,
        weights=deep.weights(),
        j_key=comfort_key(config),
        warmup=config.constraints.warmup,
        rng=np.random.default_rng([config.seed, seed, 3]),
        log_every=max(deep.log_every, 1),
        callback=callback,
        checkpoint_path=checkpoint_path,
        config_hash=config_hash(config),
    )
    metrics, _ = evaluate_network(config, run.net, seed)
    row = {"seed": seed, "method": deep.method, **deep.weights(), **metrics.to_dict()}
    log = run.log.copy()
    log.insert(0, "seed", seed)
    return row, log


def _train_job(job):
    config, seed = job
    checkpoint = output_path(config, f"{config.deep.method}_seed{seed}.npz")
    return train_and_evaluate(config, seed, checkpoint_path=checkpoint)


def run_highway_training(config) -> pd.DataFrame:
    """train and evaluate the configured method for every seed; one metrics row per seed"""
    method = config.deep.method
    results = run_parallel(_train_job, [(config, int(seed)) for seed in config.deep.seeds], config.workers)
    rows = [row for row, _ in results]
    logs = pd.concat([log for _, log in results], ignore_index=True) if results else pd.DataFrame()
    write_frame(logs, config, f"train_log_{method}.csv")
    metrics = pd.DataFrame(rows)
    if not metrics.empty:
        logger.info(
            "%s: %d/%d seeds satisfy every constraint",
            method,
            int((metrics[["viol_safety", "viol_kr", "viol_comfort", "collisions"]].sum(axis=1) == 0).sum()),
            len(metrics),
        )
    return write_frame(metrics, config, f"metrics_{method}.csv")


def _search_job(job):
    config, sample, weights = job
    seed = int(config.deep.seeds[0])
    row, _ = train_and_evaluate(config, seed)
    return {"sample": sample, **weights, **row}


def run_random_search(config):
    """train the search baseline for every sampled weight vector at the reduced budget

    Returns
    -------
    results : pandas.DataFrame
        one row per sample: weights, mean speed, violations per episode, ``collapsed`` flag.
    summary : pandas.DataFrame
        rank correlation of speed and violations, its permutation p-value and the incumbent.
    """
    space = config.search
    if space.method not in (Method.REWARD_SHAPING.value, Method.LOSS_PENALTY.value):
        raise ValueError(f"random search is defined for the penalty baselines, not {space.method!r}")
    samples = sample_search_space(space, rng=np.random.default_rng([config.seed, 4]))
    reduced = apply_overrides(
        config,
        {"deep.method": space.method, "deep.steps": int(round(config.deep.steps * space.budget_fraction))},
    )
    ensure_buffer(reduced, int(config.deep.seeds[0]))
    jobs = [(apply_overrides(reduced, {f"deep.{k}": v for k, v in w.items()}), i, w) for i, w in enumerate(samples)]
    results = pd.DataFrame(run_parallel(_search_job, jobs, config.workers))
    results["violations"] = results[["viol_safety", "viol_kr", "viol_comfort"]].sum(axis=1)
    results["collapsed"] = results["lane_changes"] == 0

    rho, p_value = permutation_test(
        results["mean_speed"], results["violations"], space.n_permutations, rng=np.random.default_rng([config.seed, 5])
    )
    incumbent = select_incumbent(results)
    summary = {
        "seed": int(config.deep.seeds[0]),
        "method": space.method,
        "n_samples": len(results),
        "spearman_rho": rho,
        "p_value": p_value,
        "incumbent": -1 if incumbent is None else int(incumbent["sample"]),
    }
    for name in space.bounds():
        summary[f"incumbent_{name}"] = np.nan if incumbent is None else float(incumbent[name])
    logger.info("search %s: spearman %.3f (p=%.4f)", space.method, rho, p_value)
    return (
        write_frame(results, config, f"search_{space.method}.csv"),
        write_frame(pd.DataFrame([summary]), config, f"search_{space.method}_summary.csv"),
    )


def acceptance_failures(metrics, params) -> list[str]:
    """constraint checks that a trained CDQN-MSC policy is expected to pass"""
    failures = []
    if metrics.viol_safety > 0 or metrics.collisions > 0:
        failures.append(f"safety violations {metrics.viol_safety:.3f}, collisions {metrics.collisions}")
    if metrics.viol_kr > 0:
        failures.append(f"keep-right violations {metrics.viol_kr:.3f}")
    if params.comfort == "lcmax" and metrics.max_lane_changes_window > params.beta_lcmax:
        failures.append(f"{metrics.max_lane_changes_window} lane changes within one comfort window")
    if params.comfort == "vgmin" and metrics.viol_comfort > 0:
        failures.append(f"comfort violations {metrics.viol_comfort:.3f}")
    return failures


def run_evaluation(config, checkpoint):
    """evaluate a saved network; returns the metrics and the per-episode frame"""
    net, meta = load_checkpoint(checkpoint)
    if meta["config_hash"] and meta["config_hash"] != config_hash(config):
        logger.warning("checkpoint config %s differs from %s", meta["config_hash"], config_hash(config))
    metrics, episodes = evaluate_network(config, net, config.seed)
    episodes.insert(0, "seed", config.seed)
    stem = os.path.splitext(os.path.basename(str(checkpoint)))[0]
    write_frame(episodes, config, f"eval_{stem}_episodes.csv")
    write_frame(pd.DataFrame([{"seed": config.seed, **metrics.to_dict()}]), config, f"eval_{stem}.csv")
    return metrics, episodes

