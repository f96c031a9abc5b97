import os
import unittest

import numpy as np
from parameterized import parameterized

import tests.random_mdp as rm
from cqlearn.envs.mdps import TreeMdpParams, build_fig3_mdp, build_tree_mdp
from cqlearn.errors import ConfigError
from cqlearn.mdp import ConstraintKind, ConstraintSpec, Transition, extract_policy_spe, forbidden_action_constraint
from cqlearn.planning import evaluate_policy_exact, initial_value, q_from_values, rollout_greedy, value_iteration
from cqlearn.tabular import (
    Algorithm,
    JTable,
    JTableSource,
    QTable,
    TrainingSchedule,
    constrained_q_step,
    greedy_initial_value,
    j_step,
    q_learning_step,
    run_tabular_training,
    violation_count,
)

SEED = 3
rm.set_seed(SEED)
SLOW = os.environ.get("CQLEARN_SLOW", "") not in ("", "0")


class TestUpdateRules(unittest.TestCase):
    def test_q_learning_step(self):
        q = QTable(2, 2, alpha=0.5)
        q.values[1] = [1.0, 4.0]
        q_learning_step(q, Transition(0, 1, 2.0, 1, False), gamma=0.5)
        self.assertAlmostEqual(q.values[0, 1], 0.5 * (2.0 + 0.5 * 4.0))

    def test_terminal_successor_does_not_bootstrap(self):
        q = QTable(2, 2, alpha=1.0)
        q.values[1] = [10.0, 10.0]
        q_learning_step(q, Transition(0, 0, 1.0, 1, True), gamma=1.0)
        self.assertEqual(q.values[0, 0], 1.0)

    def test_constrained_q_step_masks_the_bootstrap(self):
        q = QTable(2, 2, alpha=1.0)
        q.values[1] = [1.0, 4.0]
        forbid = forbidden_action_constraint("f", [[False, False], [False, True]])
        constrained_q_step(q, Transition(0, 0, 0.0, 1, False), 1.0, [forbid])
        self.assertEqual(q.values[0, 0], 1.0)

    def test_constrained_q_step_without_constraints_is_q_learning(self):
        q1 = QTable(3, 2, alpha=0.3, init=rm.get_rng(SEED).normal(size=(3, 2)))
        q2 = q1.copy()
        tr = Transition(0, 1, 0.7, 2, False)
        q_learning_step(q1, tr, 0.9)
        constrained_q_step(q2, tr, 0.9, [])
        np.testing.assert_array_equal(q1.values, q2.values)

    def test_alpha_range(self):
        with self.assertRaises(ConfigError):
            QTable(2, 2, alpha=1.5)
        with self.assertRaises(ConfigError):
            JTable(2, 2, horizon=0)

    def test_j_step_all_horizons(self):
        q = QTable(2, 2)
        q.values[1] = [0.0, 1.0]
        j = JTable(2, 2, horizon=3, alpha=1.0)
        j.values[:, 1, 1] = [5.0, 6.0, 7.0]
        j_step(j, Transition(0, 0, 0.0, 1, False), 1.0, q)
        np.testing.assert_array_equal(j.values[:, 0, 0], [1.0, 6.0, 7.0])
        self.assertEqual(j.n_updates, 1)

    def test_j_converges_to_expected_counts(self):
        # deterministic chain 0 -> 1 -> 2 (terminal) with j_t = 1 on every step
        q = QTable(3, 1)
        j = JTable(3, 1, horizon=3, alpha=0.5)
        for _ in range(200):
            j_step(j, Transition(1, 0, 0.0, 2, True), 1.0, q)
            j_step(j, Transition(0, 0, 0.0, 1, False), 1.0, q)
        np.testing.assert_allclose(j.values[:, 0, 0], [1.0, 2.0, 2.0], atol=1e-8)
        np.testing.assert_allclose(j.values[:, 1, 0], [1.0, 1.0, 1.0], atol=1e-8)

    def test_j_table_source_warmup(self):
        spec = ConstraintSpec("lc", 1.0, kind=ConstraintKind.MULTI_STEP, horizon=2, immediate_signal=lambda t: 1.0)
        j = JTable(2, 2, horizon=2)
        source = JTableSource({"lc": j}, warmup=2)
        self.assertFalse(source.ready(spec))
        j.n_updates = 2
        self.assertTrue(source.ready(spec))
        with self.assertRaises(ConfigError):
            JTableSource({}).values(spec, 0)

    def test_violation_count(self):
        c1 = forbidden_action_constraint("c1", [[True, False]])
        c2 = forbidden_action_constraint("c2", [[True, True]])
        self.assertEqual(violation_count(Transition(0, 0, 0.0, 0, False), [c1, c2]), 2)
        self.assertEqual(violation_count(Transition(0, 1, 0.0, 0, False), [c1, c2]), 1)

    @parameterized.expand([(4, 2, 0), (6, 3, 1), (8, 3, 2), (10, 4, 3)])
    def test_constrained_q_fixed_point_is_masked_optimum(self, n_states, n_actions, offset):
        seed = SEED + offset
        mdp = rm.generate_deterministic_mdp(n_states, n_actions, gamma=0.9, seed=seed)
        forbidden = rm.generate_forbidden(n_states, n_actions, seed=seed + 100)
        constraints = [forbidden_action_constraint("forbidden", forbidden)]
        q = QTable(n_states, n_actions, alpha=1.0)
        for _ in range(400):
            for s in range(n_states):
                for a in range(n_actions):
                    constrained_q_step(q, mdp.step(s, a, None), mdp.gamma, constraints)
        _, values = value_iteration(mdp, masks=~forbidden)
        np.testing.assert_allclose(q.values, q_from_values(mdp, values), atol=1e-6)


class TestTabularTraining(unittest.TestCase):
    def test_schedule_validation(self):
        with self.assertRaises(ConfigError):
            TrainingSchedule(exploration="boltzmann")
        with self.assertRaises(ConfigError):
            TrainingSchedule(patience=0)

    def test_without_constraints_reduces_to_q_learning(self):
        mdp, _ = build_fig3_mdp()
        schedule = TrainingSchedule(max_episodes=200, patience=10_000)
        plain = run_tabular_training(mdp, Algorithm.Q_LEARNING, schedule, (), rng=SEED)
        constrained = run_tabular_training(mdp, Algorithm.CONSTRAINED_Q, schedule, (), rng=SEED)
        np.testing.assert_array_equal(plain.q.values, constrained.q.values)

    def test_fig3_learning(self):
        mdp, constraints = build_fig3_mdp()
        schedule = TrainingSchedule(max_episodes=5000)
        plain = run_tabular_training(mdp, Algorithm.Q_LEARNING, schedule, (), rng=SEED)
        self.assertTrue(plain.converged)
        self.assertEqual(rollout_greedy(mdp, plain.policy)[0], 3.0)
        constrained = run_tabular_training(mdp, Algorithm.CONSTRAINED_Q, schedule, constraints, rng=SEED)
        self.assertTrue(constrained.converged)
        self.assertEqual(rollout_greedy(mdp, constrained.policy)[0], 2.0)

    def test_learning_curve(self):
        mdp, constraints = build_fig3_mdp()
        result = run_tabular_training(
            mdp, Algorithm.CONSTRAINED_Q, TrainingSchedule(max_episodes=50, patience=5), constraints, rng=SEED
        )
        curve = result.curve
        columns = ["seed", "algorithm", "episode", "samples", "greedy_return", "is_optimal"]
        self.assertEqual(list(curve.columns), columns)
        self.assertTrue((np.diff(curve["samples"]) >= 0).all())
        self.assertEqual(curve["episode"].iloc[0], 0)
        self.assertEqual(curve["seed"].iloc[0], SEED)
        if result.converged:
            self.assertTrue(curve["is_optimal"].iloc[-5:].all())

    def test_greedy_value_on_reached_states(self):
        mdp, constraints = build_tree_mdp(TreeMdpParams(branches=3, tail_length=4))
        for offset in range(5):
            q = QTable(mdp.n_states, mdp.n_actions, init=rm.get_rng(SEED + offset).normal(size=(mdp.n_states, 2)))
            full = initial_value(mdp, evaluate_policy_exact(mdp, extract_policy_spe(q, constraints)))
            self.assertAlmostEqual(greedy_initial_value(mdp, q, constraints), full)

    def test_safe_exploration_avoids_unsafe_states(self):
        mdp, constraints = build_tree_mdp(TreeMdpParams(branches=2, tail_length=3))
        schedule = TrainingSchedule(max_episodes=300, patience=10_000, exploration="safe", q_init=5.0)
        # action a of d_k enters the unsafe state x_k
        entries = [mdp.state_labels.index(f"d{k}") for k in (1, 2)]
        constrained = run_tabular_training(mdp, Algorithm.CONSTRAINED_Q, schedule, constraints, rng=SEED)
        self.assertTrue((constrained.q.values[entries, 0] == 5.0).all())
        # the reward-shaped baseline has no safe set while acting
        shaped = run_tabular_training(mdp, Algorithm.REWARD_SHAPED, schedule, constraints, rng=SEED)
        self.assertTrue((shaped.q.values[entries, 0] < 5.0).all())

    def test_budget_exhaustion(self):
        mdp, constraints = build_tree_mdp(TreeMdpParams(branches=3, tail_length=10))
        result = run_tabular_training(
            mdp, Algorithm.REWARD_SHAPED, TrainingSchedule(max_episodes=3, patience=100), constraints, rng=SEED
        )
        self.assertFalse(result.converged)
        self.assertIsNone(result.converged_samples)
        self.assertEqual(result.curve["episode"].iloc[-1], 3)

    @parameterized.expand([(Algorithm.CONSTRAINED_Q,), (Algorithm.REWARD_SHAPED,)])
    def test_tree_mdp_converges(self, algorithm):
        if not SLOW:
            self.skipTest("set CQLEARN_SLOW=1 to run")
        mdp, constraints = build_tree_mdp(2)
        result = run_tabular_training(mdp, algorithm, TrainingSchedule(max_episodes=20_000), constraints, rng=SEED)
        self.assertTrue(result.converged)
        self.assertEqual(rollout_greedy(mdp, result.policy)[0], 2.0)


if __name__ == "__main__":
    unittest.main()
