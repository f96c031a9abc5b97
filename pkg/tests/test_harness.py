import os
import tempfile
import unittest

import numpy as np
import pandas as pd
import yaml
from parameterized import parameterized

from cqlearn.deep.evaluation import EvaluationMetrics
from cqlearn.deep.net import MultiHeadNet
from cqlearn.errors import ConfigError
from cqlearn.harness.cli import EXIT_ASSERT, EXIT_CONFIG, EXIT_OK, main
from cqlearn.harness.config import (
    ExperimentConfig,
    SearchSpace,
    apply_overrides,
    config_hash,
    load_config,
    save_config,
)
from cqlearn.harness.experiments import (
    acceptance_failures,
    evaluation_constraints,
    run_highway_training,
    run_parallel,
    run_tree_sweep,
    summarize_tree_sweep,
    training_constraints,
)
from cqlearn.harness.plotdata import PLOT_COLUMNS, emit_plot_data, tidy_frame
from cqlearn.harness.search import permutation_test, sample_search_space, select_incumbent
from cqlearn.highway_constraints import HighwayConstraintParams

SEED = 13
SLOW = os.environ.get("CQLEARN_SLOW", "") not in ("", "0")
WORKERS = min(8, os.cpu_count() or 1)

SMALL_HIGHWAY = {
    "env": {"num_vehicles": 5, "episode_steps": 5},
    "constraints": {"warmup": 2},
    "deep": {
        "collection_vehicle_counts": [5],
        "phi": [4, 6],
        "rho": [6, 3],
        "trunk": [5],
        "batch_size": 4,
        "log_every": 2,
    },
    "eval": {"vehicle_counts": [5]},
}


def metrics(**kwargs):
    values = dict(
        episodes=1,
        steps=60,
        mean_speed=20.0,
        viol_safety=0.0,
        viol_kr=0.0,
        viol_comfort=0.0,
        lane_changes=1.0,
        max_lane_changes_window=1,
        collisions=0,
        viol_safety_per_1000=0.0,
        viol_kr_per_1000=0.0,
        viol_comfort_per_1000=0.0,
    )
    values.update(kwargs)
    return EvaluationMetrics(**values)


class TestConfig(unittest.TestCase):
    def test_overrides(self):
        config = apply_overrides(ExperimentConfig(), {"deep.steps": 10, "deep.lr": 1, "tabular.branches": [1, 2]})
        self.assertEqual(config.deep.steps, 10)
        self.assertIsInstance(config.deep.lr, float)
        self.assertEqual(config.tabular.branches, (1, 2))

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            apply_overrides(ExperimentConfig(), {"deep.stepz": 10})
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.yaml")
            with open(path, "w") as fp:
                yaml.safe_dump({"env": {"lanes": 4}}, fp)
            with self.assertRaises(ConfigError):
                load_config(path)

    @parameterized.expand(
        [
            ({"deep.method": "ppo"},),
            ({"constraints.comfort": "smooth"},),
            ({"env.num_lanes": 0},),
            ({"workers": 0},),
            ({"eval.spe": "partial"},),
            ({"search.n_samples": 0},),
        ]
    )
    def test_invalid_values(self, overrides):
        with self.assertRaises(ConfigError):
            apply_overrides(ExperimentConfig(), overrides)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/config.yaml")

    def test_hash(self):
        base = ExperimentConfig()
        self.assertEqual(len(config_hash(base)), 16)
        self.assertEqual(config_hash(base), config_hash(ExperimentConfig()))
        moved = apply_overrides(base, {"output_dir": "elsewhere", "experiment": "train", "workers": 4})
        self.assertEqual(config_hash(moved), config_hash(base))
        self.assertNotEqual(config_hash(apply_overrides(base, {"seed": 1})), config_hash(base))

    def test_saved_config_reloads(self):
        config = apply_overrides(ExperimentConfig(), {"deep.seeds": [3, 4], "constraints.comfort": "vgmin"})
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.yaml")
            save_config(config, path)
            self.assertEqual(config_hash(load_config(path)), config_hash(config))


class TestSearch(unittest.TestCase):
    def test_samples_within_bounds(self):
        space = SearchSpace(method="loss_penalty", n_samples=200)
        samples = sample_search_space(space, rng=SEED)
        self.assertEqual(len(samples), 200)
        for weights in samples:
            self.assertEqual(list(weights), ["lambda_comfort", "lambda_kr", "lambda_safe"])
            for value in weights.values():
                self.assertTrue(1e-3 <= value <= 10.0)
        # log-uniform: about half of the draws lie below the geometric midpoint 0.1
        below = np.mean([w["lambda_kr"] < 0.1 for w in samples])
        self.assertTrue(0.35 < below < 0.65)
        self.assertEqual(samples, sample_search_space(space, rng=SEED))

    def test_incumbent(self):
        results = pd.DataFrame(
            {
                "sample": [0, 1, 2, 3],
                "violations": [0.0, 0.5, 0.5, 0.0],
                "mean_speed": [30.0, 25.0, 26.0, 22.0],
                "collapsed": [True, False, False, False],
            }
        )
        self.assertEqual(select_incumbent(results)["sample"], 3)
        results.loc[3, "collapsed"] = True
        self.assertEqual(select_incumbent(results)["sample"], 2)
        results["collapsed"] = True
        self.assertIsNone(select_incumbent(results))

    def test_permutation_test(self):
        x = np.arange(12.0)
        rho, p_value = permutation_test(x, x**2, n_permutations=2000, rng=SEED)
        self.assertAlmostEqual(rho, 1.0)
        self.assertLess(p_value, 0.01)
        rho, p_value = permutation_test(x, -x, n_permutations=2000, rng=SEED)
        self.assertAlmostEqual(rho, -1.0)
        self.assertGreater(p_value, 0.99)

    def test_permutation_test_degenerate(self):
        rho, p_value = permutation_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        self.assertTrue(np.isnan(rho))
        self.assertEqual(p_value, 1.0)


class TestExperiments(unittest.TestCase):
    def test_run_parallel_keeps_order(self):
        self.assertEqual(run_parallel(abs, [-3, 1, -2]), [3, 1, 2])
        self.assertEqual(run_parallel(abs, [-3, 1, -2], workers=2), [3, 1, 2])

    def test_summary_ratio(self):
        runs = pd.DataFrame(
            {
                "branches": [1, 1, 1, 1],
                "algorithm": ["constrained_q", "constrained_q", "reward_shaped", "reward_shaped"],
                "seed": [0, 1, 0, 1],
                "converged": [True, True, True, False],
                "episodes": [10, 12, 30, 50],
                "samples": [100, 120, 300, 500],
            }
        )
        summary = summarize_tree_sweep(runs)
        self.assertEqual(summary["mean_samples"].tolist(), [110.0, 400.0])
        self.assertEqual(summary["n_converged"].tolist(), [2, 1])
        self.assertAlmostEqual(summary["ratio"].iloc[0], 110.0 / 400.0)

    def test_tree_sweep(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = apply_overrides(
                ExperimentConfig(),
                {
                    "output_dir": tmp,
                    "tabular.branches": [1, 2],
                    "tabular.seeds": 2,
                    "tabular.max_episodes": 100,
                    "tabular.patience": 5,
                },
            )
            runs, summary = run_tree_sweep(config)
            self.assertTrue(os.path.exists(os.path.join(tmp, "tree_sweep_runs.csv")))
            written = pd.read_csv(os.path.join(tmp, "tree_sweep_summary.csv"))
        self.assertEqual(len(runs), 8)
        self.assertEqual(list(runs.columns[:2]), ["config_hash", "branches"])
        self.assertTrue((runs["config_hash"] == config_hash(config)).all())
        self.assertEqual(len(summary), 4)
        self.assertIn("ratio", written.columns)

    def test_tree_sweep_sample_ratio(self):
        if not SLOW:
            self.skipTest("set CQLEARN_SLOW=1 to run")
        with tempfile.TemporaryDirectory() as tmp:
            config = apply_overrides(
                ExperimentConfig(), {"output_dir": tmp, "tabular.max_episodes": 20_000, "workers": WORKERS}
            )
            _, summary = run_tree_sweep(config)
        ratio = summary.drop_duplicates("branches").set_index("branches")["ratio"]
        self.assertEqual(list(ratio.index), list(range(1, 11)))
        self.assertLessEqual(ratio[1], 0.80)
        self.assertLessEqual(ratio[10], 0.35)
        # decreasing in B with at most one inversion
        self.assertLessEqual(int((np.diff(ratio.to_numpy()) > 0).sum()), 1)

    def test_constraint_selection(self):
        net = MultiHeadNet(3, 0, phi=(2,), rho=(2,), trunk=(2,))

        def names(constraints):
            return [c.name for c in constraints]

        cdqn = apply_overrides(ExperimentConfig(), {"deep.method": "cdqn"})
        self.assertEqual(names(training_constraints(cdqn)), ["safety", "keep_right"])
        self.assertEqual(names(evaluation_constraints(cdqn, net)), ["safety", "keep_right"])
        msc = apply_overrides(ExperimentConfig(), {"deep.method": "cdqn_msc"})
        self.assertEqual(names(training_constraints(msc)), ["safety", "keep_right", "comfort"])
        dqn = apply_overrides(ExperimentConfig(), {"deep.method": "dqn"})
        self.assertEqual(training_constraints(dqn), [])
        self.assertEqual(names(evaluation_constraints(dqn, net)), ["safety"])
        full = apply_overrides(dqn, {"eval.spe": "full"})
        self.assertEqual(names(evaluation_constraints(full, net)), ["safety", "keep_right"])
        self.assertEqual(evaluation_constraints(apply_overrides(dqn, {"eval.spe": "none"}), net), [])

    def test_acceptance(self):
        params = HighwayConstraintParams()
        self.assertEqual(acceptance_failures(metrics(), params), [])
        self.assertEqual(len(acceptance_failures(metrics(viol_safety=0.1, viol_kr=1.0), params)), 2)
        self.assertEqual(len(acceptance_failures(metrics(max_lane_changes_window=3), params)), 1)
        vgmin = HighwayConstraintParams(comfort="vgmin")
        self.assertEqual(len(acceptance_failures(metrics(max_lane_changes_window=3, viol_comfort=0.5), vgmin)), 1)

    def test_highway_acceptance(self):
        if not SLOW:
            self.skipTest("set CQLEARN_SLOW=1 to run")
        with tempfile.TemporaryDirectory() as tmp:
            base = apply_overrides(ExperimentConfig(), {"output_dir": tmp, "workers": WORKERS})
            msc = run_highway_training(apply_overrides(base, {"deep.method": "cdqn_msc"}))
            dqn = run_highway_training(apply_overrides(base, {"deep.method": "dqn"}))
        self.assertEqual(len(msc), 10)
        # the baseline is evaluated with safe policy extraction over the same fixed batches
        baseline = dict(zip(dqn["seed"], dqn["mean_speed"]))
        passed = [
            row.seed
            for row in msc.itertuples()
            if not acceptance_failures(row, base.constraints) and row.mean_speed >= baseline[row.seed]
        ]
        self.assertGreaterEqual(len(passed), 8)


class TestPlotData(unittest.TestCase):
    def test_empty(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = os.path.join(tmp, "plot.csv")
            data = emit_plot_data([], out)
            with open(out) as fp:
                self.assertEqual(fp.read().strip(), ",".join(PLOT_COLUMNS))
        self.assertTrue(data.empty)

    def test_sweep_rows(self):
        frame = pd.DataFrame(
            {
                "config_hash": ["h"] * 4,
                "branches": [1, 1, 2, 2],
                "algorithm": ["constrained_q"] * 4,
                "seed": [0, 1, 0, 1],
                "samples": [10, 20, 30, 30],
            }
        )
        tidy = tidy_frame(frame)
        self.assertEqual(list(tidy.columns), PLOT_COLUMNS)
        self.assertEqual(tidy["mean_samples"].tolist(), [15.0, 30.0])
        self.assertAlmostEqual(tidy["ci"].iloc[0], 1.96 * np.std([10, 20], ddof=1) / np.sqrt(2))
        self.assertEqual(tidy["ci"].iloc[1], 0.0)

    def test_search_rows(self):
        frame = pd.DataFrame(
            {
                "config_hash": ["h", "h"],
                "method": ["reward_shaping"] * 2,
                "lambda_lc": [0.5, 2.0],
                "lambda_kr": [0.25, 1.0],
                "mean_speed": [25.0, 22.0],
                "violations": [1.0, 0.0],
            }
        )
        tidy = tidy_frame(frame)
        self.assertEqual(tidy["weights"].tolist(), ["lambda_kr=0.25;lambda_lc=0.5", "lambda_kr=1;lambda_lc=2"])
        self.assertEqual(tidy["kind"].tolist(), ["search", "search"])

    def test_unknown_columns(self):
        with self.assertRaises(ConfigError):
            tidy_frame(pd.DataFrame({"a": [1]}))


class TestCli(unittest.TestCase):
    def test_bad_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.yaml")
            with open(path, "w") as fp:
                yaml.safe_dump({"tabular": {"unknown": 1}}, fp)
            self.assertEqual(main(["fig3", "--config", path, "--output-dir", tmp]), EXIT_CONFIG)

    def test_fig3(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(main(["fig3", "--output-dir", tmp, "--seed", str(SEED)]), EXIT_OK)
            report = pd.read_csv(os.path.join(tmp, "fig3.csv"))
            self.assertTrue(os.path.exists(os.path.join(tmp, "config_fig3.yaml")))
        returns = dict(zip(report["method"], report["return"]))
        self.assertEqual(returns, {"q_learning": 3.0, "spe": 1.0, "constrained_q": 2.0, "cpi": 2.0})
        terminals = dict(zip(report["method"], report["terminal_state"]))
        self.assertEqual(terminals["spe"], "s10")

    def test_tree_sweep_and_plot_data(self):
        with tempfile.TemporaryDirectory() as tmp:
            args = ["tree-sweep", "--output-dir", tmp, "--branches", "1", "--seeds", "2", "--max-episodes", "50"]
            self.assertEqual(main(args + ["--patience", "3"]), EXIT_OK)
            out = os.path.join(tmp, "plot.csv")
            self.assertEqual(main(["plot-data", os.path.join(tmp, "tree_sweep_runs.csv"), "--out", out]), EXIT_OK)
            data = pd.read_csv(out)
        self.assertEqual(sorted(data["method"]), ["constrained_q", "reward_shaped"])
        self.assertEqual(set(data["kind"]), {"tree_sweep"})

    def test_highway_pipeline(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "small.yaml")
            with open(path, "w") as fp:
                yaml.safe_dump(SMALL_HIGHWAY, fp)
            common = ["--output-dir", tmp, "--config", path, "--n-transitions", "20", "--steps", "4", "--seeds", "0"]
            self.assertEqual(main(["collect", *common]), EXIT_OK)
            self.assertTrue(os.path.exists(os.path.join(tmp, "buffer_seed0.npz")))
            self.assertEqual(main(["train", *common, "--method", "cdqn_msc", "--episodes", "1"]), EXIT_OK)
            checkpoint = os.path.join(tmp, "cdqn_msc_seed0.npz")
            self.assertTrue(os.path.exists(checkpoint))
            trained = pd.read_csv(os.path.join(tmp, "metrics_cdqn_msc.csv"))
            code = main(["eval", checkpoint, *common, "--method", "cdqn_msc", "--episodes", "1", "--assert"])
            self.assertIn(code, (EXIT_OK, EXIT_ASSERT))
            evaluated = pd.read_csv(os.path.join(tmp, "eval_cdqn_msc_seed0.csv"))
            search = ["search", *common, "--search-method", "reward_shaping", "--n-samples", "3", "--episodes", "1"]
            self.assertEqual(main(search), EXIT_OK)
            results = pd.read_csv(os.path.join(tmp, "search_reward_shaping.csv"))
            summary = pd.read_csv(os.path.join(tmp, "search_reward_shaping_summary.csv"))
        self.assertEqual(trained["seed"].tolist(), [0])
        self.assertEqual(trained["viol_safety"].tolist(), [0.0])
        self.assertEqual(evaluated["viol_safety"].tolist(), [0.0])
        self.assertEqual(len(results), 3)
        self.assertTrue({"lambda_lc", "lambda_kr", "violations", "collapsed"} <= set(results.columns))
        self.assertEqual(summary["n_samples"].tolist(), [3])


if __name__ == "__main__":
    unittest.main()
