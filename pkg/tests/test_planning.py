import os
import unittest

import numpy as np
from parameterized import parameterized

import tests.random_mdp as rm
from cqlearn.envs.mdps import build_fig3_mdp, build_tree_mdp
from cqlearn.errors import InstanceTooLargeError
from cqlearn.mdp import FiniteMdp, TabularPolicy, extract_policy_spe, safe_set
from cqlearn.planning import (
    brute_force_constrained_optimum,
    constrained_policy_iteration,
    evaluate_policy_exact,
    initial_value,
    policy_iteration,
    rollout_greedy,
    truncated_violations,
    value_iteration,
)

SEED = 7
rm.set_seed(SEED)
SLOW = os.environ.get("CQLEARN_SLOW", "") not in ("", "0")


class TestExactPlanning(unittest.TestCase):
    def test_policy_evaluation_matches_value_iteration(self):
        mdp = rm.generate_mdp(6, 3, gamma=0.9, n_terminal=1, seed=SEED)
        q, values = value_iteration(mdp)
        policy = TabularPolicy(np.argmax(q, axis=1))
        np.testing.assert_allclose(evaluate_policy_exact(mdp, policy), values, atol=1e-8)

    def test_policy_iteration_matches_value_iteration(self):
        mdp = rm.generate_mdp(7, 2, gamma=0.8, seed=SEED)
        _, values = value_iteration(mdp)
        result = policy_iteration(mdp)
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.values, values, atol=1e-8)

    def test_masked_value_iteration(self):
        mdp, constraints = build_fig3_mdp()
        masks = np.array([safe_set(s, constraints, mdp.n_actions) for s in range(mdp.n_states)])
        _, free = value_iteration(mdp)
        _, masked = value_iteration(mdp, masks)
        self.assertEqual(initial_value(mdp, free), 3.0)
        self.assertEqual(initial_value(mdp, masked), 2.0)
        for s in range(mdp.n_states):
            self.assertLessEqual(masked[s], free[s] + 1e-12)

    def test_spe_of_unconstrained_optimum_is_suboptimal(self):
        mdp, constraints = build_fig3_mdp()
        q, _ = value_iteration(mdp)
        total, final_state = rollout_greedy(mdp, extract_policy_spe(q, constraints))
        self.assertEqual(total, 1.0)
        self.assertEqual(mdp.state_labels[final_state], "s10")

    def test_truncated_violations_count_steps(self):
        # chain 0 -> 1 -> 2 -> 3 (terminal), every step violates
        transition = np.zeros((4, 1, 4))
        for s in range(3):
            transition[s, 0, s + 1] = 1.0
        transition[3, 0, 3] = 1.0
        mdp = FiniteMdp(transition, np.zeros((4, 1)), terminal=[False, False, False, True], gamma=1.0)
        j_values = truncated_violations(mdp, [0, 0, 0, 0], np.ones((4, 1)), horizon=4)
        np.testing.assert_array_equal(j_values[:, 0, 0], [1, 2, 3, 3])
        np.testing.assert_array_equal(j_values[:, 3, 0], [0, 0, 0, 0])


class TestConstrainedPolicyIteration(unittest.TestCase):
    def test_fig3(self):
        mdp, constraints = build_fig3_mdp()
        result = constrained_policy_iteration(mdp, constraints)
        self.assertTrue(result.converged)
        self.assertEqual(initial_value(mdp, result.values), 2.0)
        total, final_state = rollout_greedy(mdp, result.policy)
        self.assertEqual(total, 2.0)
        self.assertEqual(mdp.state_labels[final_state], "s11")

    def test_unpacks_as_policy_and_values(self):
        mdp, constraints = build_fig3_mdp()
        policy, values = constrained_policy_iteration(mdp, constraints)
        self.assertIsInstance(policy, TabularPolicy)
        self.assertEqual(values.shape, (mdp.n_states,))

    @parameterized.expand([(1,), (2,), (3,)])
    def test_monotone_improvement(self, horizon):
        for seed in range(5):
            mdp, constraints, _ = rm.generate_constrained_mdp(6, 3, gamma=0.9, seed=seed)
            result = constrained_policy_iteration(mdp, constraints, horizon=horizon)
            for before, after in zip(result.iterates, result.iterates[1:]):
                self.assertTrue(np.all(after.values >= before.values - 1e-9))

    @parameterized.expand([(1,), (2,), (3,)])
    def test_matches_enumeration(self, horizon):
        for seed in range(8):
            rng = rm.get_rng(seed)
            n_states = int(rng.integers(3, 9))
            n_actions = int(rng.integers(2, 4))
            mdp, constraints, forbidden = rm.generate_constrained_mdp(n_states, n_actions, gamma=0.9, seed=seed)
            result = constrained_policy_iteration(mdp, constraints, horizon=horizon)
            policy, values = brute_force_constrained_optimum(mdp, constraints)
            self.assertTrue(result.converged)
            np.testing.assert_allclose(result.values, values, atol=1e-8)
            for s in range(n_states):
                self.assertFalse(forbidden[s, result.policy(s)])
                self.assertFalse(forbidden[s, policy(s)])

    def test_random_sweep(self):
        if not SLOW:
            self.skipTest("set CQLEARN_SLOW=1 to run")
        for seed in range(200):
            rng = rm.get_rng(1000 + seed)
            n_states = int(rng.integers(2, 9))
            n_actions = int(rng.integers(2, 4))
            mdp, constraints, _ = rm.generate_constrained_mdp(n_states, n_actions, gamma=0.9, seed=1000 + seed)
            result = constrained_policy_iteration(mdp, constraints, horizon=int(rng.integers(1, 4)))
            for before, after in zip(result.iterates, result.iterates[1:]):
                self.assertTrue(np.all(after.values >= before.values - 1e-9))
            _, values = brute_force_constrained_optimum(mdp, constraints)
            np.testing.assert_allclose(result.values, values, atol=1e-6)

    @parameterized.expand([(1,), (2,), (5,)])
    def test_tree_mdp_optimum(self, branches):
        mdp, constraints = build_tree_mdp(branches)
        result = constrained_policy_iteration(mdp, constraints)
        self.assertEqual(initial_value(mdp, result.values), 2.0)
        _, free = value_iteration(mdp)
        self.assertEqual(initial_value(mdp, free), branches + 2.0)

    def test_without_constraints_is_policy_iteration(self):
        mdp = rm.generate_mdp(5, 3, gamma=0.9, seed=SEED)
        np.testing.assert_allclose(constrained_policy_iteration(mdp).values, policy_iteration(mdp).values)


class TestEnumeration(unittest.TestCase):
    def test_too_large(self):
        mdp = rm.generate_mdp(12, 3, seed=SEED)
        with self.assertRaises(InstanceTooLargeError):
            brute_force_constrained_optimum(mdp, limit=10**5)

    def test_unconstrained_matches_value_iteration(self):
        mdp = rm.generate_mdp(5, 2, gamma=0.9, seed=SEED)
        _, values = brute_force_constrained_optimum(mdp)
        _, expected = value_iteration(mdp)
        np.testing.assert_allclose(values, expected, atol=1e-8)


if __name__ == "__main__":
    unittest.main()
