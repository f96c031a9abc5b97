import os
import tempfile
import unittest

import numpy as np
from parameterized import parameterized

import tests.random_mdp as rm
from cqlearn.errors import ConfigError
from cqlearn.mdp import (
    ConstraintKind,
    ConstraintSpec,
    Direction,
    FiniteMdp,
    GreedyPolicy,
    Priority,
    StaticValueSource,
    TabularPolicy,
    extract_policy_spe,
    forbidden_action_constraint,
    greedy_action,
    resolve_masks_batch,
    safe_set,
    unsafe_state_constraint,
)

SEED = 42
rm.set_seed(SEED)


def two_state_mdp(gamma=0.9):
    transition = np.zeros((2, 2, 2))
    transition[0, 0, 1] = transition[0, 1, 0] = 1.0
    transition[1, :, 1] = 1.0
    return FiniteMdp(transition, [[1.0, 0.0], [0.0, 0.0]], terminal=[False, True], gamma=gamma)


class TestFiniteMdp(unittest.TestCase):
    def test_shapes(self):
        mdp = rm.generate_mdp(5, 3, seed=SEED)
        self.assertEqual(mdp.n_states, 5)
        self.assertEqual(mdp.n_actions, 3)
        np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0)

    def test_rows_must_sum_to_one(self):
        transition = np.zeros((2, 1, 2))
        transition[0, 0, 1] = 0.5
        transition[1, 0, 1] = 1.0
        with self.assertRaises(ValueError):
            FiniteMdp(transition, np.zeros((2, 1)))

    def test_reward_shape(self):
        transition = np.zeros((2, 1, 2))
        transition[:, 0, 1] = 1.0
        with self.assertRaises(ValueError):
            FiniteMdp(transition, np.zeros((3, 1)))

    def test_undiscounted_cycle(self):
        transition = np.zeros((2, 1, 2))
        transition[0, 0, 1] = transition[1, 0, 0] = 1.0
        with self.assertRaises(ValueError):
            FiniteMdp(transition, np.zeros((2, 1)), gamma=1.0)
        FiniteMdp(transition, np.zeros((2, 1)), gamma=0.9)

    def test_arrays_are_read_only(self):
        mdp = two_state_mdp()
        with self.assertRaises(ValueError):
            mdp.transition[0, 0, 0] = 1.0

    def test_expected_reward_zero_on_terminal(self):
        transition = np.zeros((2, 1, 2))
        transition[:, 0, 1] = 1.0
        mdp = FiniteMdp(transition, [[2.0], [5.0]], terminal=[False, True])
        np.testing.assert_array_equal(mdp.expected_reward(), [[2.0], [0.0]])

    def test_step(self):
        mdp = two_state_mdp()
        tr = mdp.step(0, 0, np.random.default_rng(SEED))
        self.assertEqual(tr.next_state, 1)
        self.assertEqual(tr.reward, 1.0)
        self.assertTrue(tr.terminal)
        tr = mdp.step(0, 1, np.random.default_rng(SEED))
        self.assertEqual(tr.next_state, 0)
        self.assertFalse(tr.terminal)

    def test_yaml_fixture(self):
        mdp = rm.generate_mdp(6, 2, n_terminal=1, seed=SEED)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "mdp.yaml")
            mdp.save(path)
            loaded = FiniteMdp.load(path)
        np.testing.assert_allclose(loaded.transition, mdp.transition)
        np.testing.assert_allclose(loaded.reward, mdp.reward)
        np.testing.assert_array_equal(loaded.terminal, mdp.terminal)
        self.assertEqual(loaded.gamma, mdp.gamma)
        self.assertEqual(loaded.state_labels, mdp.state_labels)


class TestSafeSet(unittest.TestCase):
    def test_empty_family_allows_everything(self):
        np.testing.assert_array_equal(safe_set(0, [], 3), [True, True, True])

    def test_intersection(self):
        c1 = forbidden_action_constraint("c1", [[True, False, False]])
        c2 = forbidden_action_constraint("c2", [[False, False, True]], priority=Priority.REGULAR)
        np.testing.assert_array_equal(safe_set(0, [c1, c2], 3), [False, True, False])

    def test_regular_constraints_dropped_on_conflict(self):
        safety = forbidden_action_constraint("safety", [[True, False]])
        regular = forbidden_action_constraint("regular", [[False, True]], priority=Priority.REGULAR)
        np.testing.assert_array_equal(safe_set(0, [safety, regular], 2), [False, True])
        np.testing.assert_array_equal(safe_set(0, [safety, regular], 2, resolve=False), [False, False])

    def test_fallback_action(self):
        c1 = forbidden_action_constraint("c1", [[True, False, False]])
        c2 = forbidden_action_constraint("c2", [[False, True, True]])
        np.testing.assert_array_equal(safe_set(0, [c1, c2], 3), [True, False, False])
        np.testing.assert_array_equal(safe_set(0, [c1, c2], 3, fallback_action=2), [False, False, True])

    def test_never_empty(self):
        for seed in range(10):
            forbidden = rm.get_rng(seed).random((4, 3)) < 0.7
            constraints = [
                forbidden_action_constraint("a", forbidden),
                forbidden_action_constraint("b", ~forbidden, priority=Priority.REGULAR),
            ]
            for s in range(4):
                self.assertTrue(safe_set(s, constraints, 3).any())

    @parameterized.expand([(2,), (3,), (5,)])
    def test_adding_constraints_shrinks_the_set(self, n_actions):
        rng = rm.get_rng(SEED)
        n_states = 6
        constraints = []
        previous = np.ones((n_states, n_actions), dtype=bool)
        for k in range(4):
            constraints.append(forbidden_action_constraint(f"c{k}", rng.random((n_states, n_actions)) < 0.3))
            current = np.array([safe_set(s, constraints, n_actions, resolve=False) for s in range(n_states)])
            self.assertFalse(np.any(current & ~previous))
            previous = current

    def test_at_least_direction_and_exemption(self):
        table = np.array([[0.1, 0.5, 0.0]])
        spec = ConstraintSpec(
            "gain",
            0.25,
            kind=ConstraintKind.MULTI_STEP,
            horizon=2,
            immediate_signal=lambda tr: 0.0,
            direction=Direction.AT_LEAST,
            exempt_actions=(0,),
        )
        allowed = safe_set(0, [spec], 3, evaluator=StaticValueSource({"gain": table}))
        np.testing.assert_array_equal(allowed, [True, True, False])

    def test_multi_step_needs_values(self):
        spec = ConstraintSpec("lc", 2.0, kind=ConstraintKind.MULTI_STEP, horizon=3, immediate_signal=lambda tr: 1.0)
        with self.assertRaises(ConfigError):
            safe_set(0, [spec], 2)
        with self.assertRaises(ConfigError):
            safe_set(0, [spec], 2, evaluator=StaticValueSource({}))

    def test_invalid_specs(self):
        with self.assertRaises(ConfigError):
            ConstraintSpec("no_signal")
        with self.assertRaises(ConfigError):
            ConstraintSpec("no_horizon", kind=ConstraintKind.MULTI_STEP, horizon=0, immediate_signal=lambda tr: 0.0)

    def test_batch_resolution_matches_rowwise(self):
        rng = rm.get_rng(SEED)
        masks = [rng.random((20, 3)) < 0.5 for _ in range(3)]
        priorities = [Priority.SAFETY, Priority.REGULAR, Priority.SAFETY]
        batch = resolve_masks_batch(masks, priorities, 3)
        for i in range(20):
            constraints = [
                forbidden_action_constraint(f"c{k}", ~masks[k][i : i + 1], priority=p)
                for k, p in enumerate(priorities)
            ]
            np.testing.assert_array_equal(batch[i], safe_set(0, constraints, 3))

    def test_unsafe_state_constraint(self):
        mdp = two_state_mdp()
        c = unsafe_state_constraint(mdp, [1])
        np.testing.assert_array_equal(safe_set(0, [c], 2), [False, True])
        # terminal states are never restricted
        np.testing.assert_array_equal(safe_set(1, [c], 2), [True, True])


class TestPolicyExtraction(unittest.TestCase):
    def test_greedy_ties_go_to_lowest_index(self):
        self.assertEqual(greedy_action([1.0, 3.0, 3.0]), 1)
        self.assertEqual(greedy_action([1.0, 3.0, 3.0], [True, False, True]), 2)

    def test_spe_on_table(self):
        q = np.array([[1.0, 2.0], [4.0, 3.0]])
        forbidden = forbidden_action_constraint("f", [[False, True], [False, False]])
        self.assertEqual(extract_policy_spe(q), TabularPolicy([1, 0]))
        self.assertEqual(extract_policy_spe(q, [forbidden]), TabularPolicy([0, 0]))

    def test_spe_on_callable(self):
        forbidden = forbidden_action_constraint("f", [[False, True]])
        policy = extract_policy_spe(lambda s: np.array([0.0, 1.0]), [forbidden])
        self.assertIsInstance(policy, GreedyPolicy)
        self.assertEqual(policy(0), 0)

    def test_spe_actions_are_safe(self):
        mdp, constraints, forbidden = rm.generate_constrained_mdp(8, 3, seed=SEED)
        q = rm.get_rng(SEED).normal(size=(8, 3))
        policy = extract_policy_spe(q, constraints)
        for s in range(8):
            self.assertFalse(forbidden[s, policy(s)])


if __name__ == "__main__":
    unittest.main()
