#!/usr/bin/env python3
"""
Tests for the star operator, trajectory recursion, portfolio pairing and binned estimates
"""

import itertools
import unittest

import numpy as np

from core.datapipe import EQV_NAMES, compute_transition
from core.errors import ConfigError, EvaluationError, PositivityError, ShapeMismatchError
from core.sampler import ChainConfig, ScenarioBox
from core.simulator import (
    EQV_RELATIVE,
    SimulationConfig,
    apply_star,
    bin_fractions,
    binned_estimate,
    binned_frame,
    check_boxes,
    default_bin_edges,
    portfolio_simulate,
    single_trajectory,
    star_step,
    trajectory_frame,
)

INITIAL = np.array([50.0, 5e9, 60.0, 2.0, 0.5, 0.4, 0.3, 0.2, 0.0, 0.0, 0.25])
CHAIN = ChainConfig(proposal_std=0.5, burn_in=20, thinning=2, chains=2, seed=1)


class StubModels:
    """Linear state map with instrument transitions driven by the latent and state draw"""

    def __init__(self, price_shock=0.01):
        self.price_shock = price_shock

    def generate_state(self, z):
        return np.asarray(z)[:, :7]

    def encode_state(self, ds):
        return np.hstack([ds, np.zeros((len(ds), 1))])

    def generate_instrument(self, z, levels, ds):
        out = np.zeros((len(z), 11))
        out[:, 0] = self.price_shock * z[:, 0]
        out[:, 2] = ds[:, 0]
        return out


class FlatModels(StubModels):
    def generate_instrument(self, z, levels, ds):
        return np.zeros((len(z), 11))


class CrashModels(StubModels):
    """Wipes out the share price whenever the first latent coordinate is positive"""

    def generate_instrument(self, z, levels, ds):
        out = np.zeros((len(z), 11))
        out[:, 0] = np.where(z[:, 0] > 0, -1.5, 0.0)
        return out


class TestStarOperator(unittest.TestCase):
    """Applying transitions to levels"""

    def test_relative_and_absolute_kinds(self):
        d = np.zeros(11)
        d[0], d[2], d[10] = 0.1, -5.0, 0.05
        out = apply_star(INITIAL, d)
        self.assertAlmostEqual(out[0], 55.0)
        self.assertAlmostEqual(out[2], 55.0)
        self.assertAlmostEqual(out[10], 0.30)
        self.assertEqual(out[1], INITIAL[1])

    def test_inverse_of_transition(self):
        target = INITIAL * np.linspace(0.5, 1.5, 11) + 0.1
        d = compute_transition(INITIAL, target, EQV_RELATIVE)
        np.testing.assert_allclose(apply_star(INITIAL, d), target, rtol=1e-12)

    def test_non_positive_result(self):
        d = np.zeros(11)
        d[1] = -1.0
        with self.assertRaises(PositivityError) as ctx:
            apply_star(INITIAL, d, step=4)
        self.assertEqual(ctx.exception.feature_index, 1)
        self.assertEqual(ctx.exception.step, 4)

    def test_absolute_kinds_may_go_negative(self):
        d = np.zeros(11)
        d[8] = -3.0
        self.assertEqual(apply_star(INITIAL, d)[8], -3.0)

    def test_shape_check(self):
        with self.assertRaises(ShapeMismatchError):
            apply_star(INITIAL, np.zeros(10))

    def test_batched_step_flags_instead_of_raising(self):
        levels = np.tile(INITIAL, (3, 1))
        d = np.zeros((3, 11))
        d[1, 0] = -1.5
        d[2, 1] = np.nan
        d[2, 8] = -10.0
        out, flags = star_step(levels, d)
        np.testing.assert_array_equal(out[0], apply_star(INITIAL, d[0]))
        self.assertEqual(flags.shape, (3, 11))
        self.assertFalse(flags[0].any())
        self.assertEqual(np.flatnonzero(flags[1]).tolist(), [0])
        self.assertEqual(np.flatnonzero(flags[2]).tolist(), [1])
        self.assertEqual(out[2, 8], -10.0)
        with self.assertRaises(ShapeMismatchError):
            star_step(levels, d[:, :10])


class TestSingleTrajectory(unittest.TestCase):
    """One-instrument recursion"""

    def test_zero_transitions_keep_levels(self):
        path = single_trajectory(INITIAL, [ScenarioBox()] * 3, FlatModels(), CHAIN, seed=5)
        self.assertEqual(path.levels.shape, (4, 11))
        for t in range(4):
            np.testing.assert_array_equal(path.levels[t], INITIAL)

    def test_replay_and_boxes(self):
        boxes = [ScenarioBox.from_mapping({"stv1": [0.0, 0.5]}), ScenarioBox.from_mapping({"stv1": [-0.5, 0.0]})]
        path = single_trajectory(INITIAL, boxes, StubModels(), CHAIN, seed=6)
        np.testing.assert_allclose(path.replay(), path.levels)
        self.assertTrue(0.0 <= path.state_transitions[0, 0] <= 0.5)
        self.assertTrue(-0.5 <= path.state_transitions[1, 0] <= 0.0)
        self.assertAlmostEqual(path.levels[1, 2], INITIAL[2] + path.state_transitions[0, 0])

    def test_states_carry_time_index(self):
        path = single_trajectory(INITIAL, [ScenarioBox()] * 2, StubModels(), CHAIN, seed=3, instrument="AAA")
        states = path.states()
        self.assertEqual([s.t for s in states], [0, 1, 2])
        self.assertEqual({s.instrument for s in states}, {"AAA"})
        np.testing.assert_array_equal(states[2].levels, path.levels[2])

    def test_depth_zero(self):
        path = single_trajectory(INITIAL, [], StubModels(), CHAIN, seed=1)
        self.assertEqual(path.depth, 0)
        np.testing.assert_array_equal(path.levels, INITIAL[None, :])

    def test_same_seed_same_path(self):
        a = single_trajectory(INITIAL, [ScenarioBox()] * 2, StubModels(), CHAIN, seed=8)
        b = single_trajectory(INITIAL, [ScenarioBox()] * 2, StubModels(), CHAIN, seed=8)
        np.testing.assert_array_equal(a.levels, b.levels)


class TestPortfolio(unittest.TestCase):
    """Pairing of latent and state draws across a portfolio"""

    def setUp(self):
        self.initial = np.vstack([INITIAL, INITIAL * 2])

    def test_pairs_cover_the_product_and_are_shared(self):
        run = portfolio_simulate(self.initial, [ScenarioBox()] * 2, 2, 3, StubModels(), CHAIN, seed=3)
        product = set(itertools.product(range(2), range(3)))
        for t in range(2):
            self.assertEqual({tuple(p) for p in run.pairs[0, t]}, product)
        np.testing.assert_array_equal(run.pairs[0], run.pairs[1])
        self.assertEqual(run.n_trajectories, 6)
        self.assertEqual(run.levels.shape, (2, 6, 3, 11))

    def test_shared_pairs_give_same_state_path(self):
        run = portfolio_simulate(self.initial, [ScenarioBox()] * 2, 2, 3, StubModels(), CHAIN, seed=3)
        np.testing.assert_array_equal(run.state_transitions[0], run.state_transitions[1])

    def test_independent_pairing(self):
        run = portfolio_simulate(self.initial, [ScenarioBox()], 3, 4, StubModels(), CHAIN, seed=3,
                                 pair_sharing="per_instrument")
        product = set(itertools.product(range(3), range(4)))
        for k in range(2):
            self.assertEqual({tuple(p) for p in run.pairs[k, 0]}, product)
        self.assertFalse(np.array_equal(run.pairs[0], run.pairs[1]))

    def test_each_distinct_box_sampled_once(self):
        box = ScenarioBox.from_mapping({"stv2": [-0.2, 0.2]})
        run = portfolio_simulate(self.initial, [box, box, ScenarioBox()], 2, 2, StubModels(), CHAIN, seed=4)
        self.assertEqual(run.mcmc_passes, 2)
        self.assertEqual(run.box_of_step.tolist(), [0, 0, 1])
        self.assertTrue(check_boxes(run))

    def test_zero_depth(self):
        run = portfolio_simulate(self.initial, [], 2, 2, StubModels(), CHAIN, seed=4)
        self.assertEqual(run.depth, 0)
        self.assertEqual(len(binned_frame(run, 0)), 0)
        self.assertEqual(len(trajectory_frame(run, 1)), 4)

    def test_aborted_trajectories(self):
        run = portfolio_simulate(self.initial, [ScenarioBox()] * 2, 8, 2, CrashModels(), CHAIN, seed=2)
        self.assertTrue(run.aborted)
        first = run.aborted[0]
        self.assertEqual(first["feature"], 0)
        row = first["trajectory"]
        k = run.instruments.index(first["instrument"])
        self.assertTrue(np.all(np.isnan(run.levels[k, row, first["step"] + 1:])))
        edges = np.array([-1.0, 1.0])
        estimate = binned_estimate(run, 0, 0, edges)
        self.assertLess(estimate.mean.sum(), 1.0)

    def test_bad_configuration(self):
        with self.assertRaises(ConfigError):
            portfolio_simulate(self.initial, [], 2, 2, StubModels(), CHAIN, seed=1, pair_sharing="other")
        with self.assertRaises(ConfigError):
            SimulationConfig(trajectories=10, state_draws=3, seed=1).validate()
        self.assertEqual(SimulationConfig(seed=1).validate().latent_draws, 10)

    def test_same_seed_same_run(self):
        a = portfolio_simulate(self.initial, [ScenarioBox()] * 2, 2, 2, StubModels(), CHAIN, seed=9)
        b = portfolio_simulate(self.initial, [ScenarioBox()] * 2, 2, 2, StubModels(), CHAIN, seed=9)
        np.testing.assert_array_equal(a.levels, b.levels)
        np.testing.assert_array_equal(a.pairs, b.pairs)


class TestBinnedEstimates(unittest.TestCase):
    """Trajectory-averaged bin indicators"""

    def test_fractions_sum_to_one(self):
        run = portfolio_simulate(INITIAL, [ScenarioBox()], 5, 4, StubModels(), CHAIN, seed=6)
        values = run.transitions[0, :, 0, 0]
        edges = default_bin_edges(values, bins=7, lower_pct=0.0, upper_pct=100.0)
        estimate = binned_estimate(run, 0, 0, edges)
        self.assertAlmostEqual(estimate.mean.sum(), 1.0)
        self.assertEqual(estimate.n, 20)
        frame = estimate.to_frame()
        self.assertEqual(list(frame.columns), ["feature", "t", "bin_lo", "bin_hi", "mean", "stderr"])
        self.assertEqual(frame["feature"].iloc[0], EQV_NAMES[0])

    def test_last_bin_is_closed(self):
        mean, stderr = bin_fractions([0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
        np.testing.assert_allclose(mean, [1 / 3, 2 / 3])
        mean, stderr = bin_fractions([2.0] * 5, [0.0, 1.0, 2.0])
        np.testing.assert_array_equal(mean, [0.0, 1.0])
        np.testing.assert_array_equal(stderr, [0.0, 0.0])

    def test_level_quantity(self):
        run = portfolio_simulate(INITIAL, [ScenarioBox()], 2, 2, FlatModels(), CHAIN, seed=6)
        estimate = binned_estimate(run, 1, 1, [0.0, 1e10], quantity="level")
        np.testing.assert_array_equal(estimate.mean, [1.0])

    def test_invalid_edges(self):
        with self.assertRaises(EvaluationError):
            bin_fractions([1.0], [1.0])
        with self.assertRaises(EvaluationError):
            bin_fractions([1.0], [0.0, 2.0, 1.0])

    def test_binned_frame_rows(self):
        run = portfolio_simulate(INITIAL, [ScenarioBox()] * 2, 2, 3, StubModels(), CHAIN, seed=6)
        frame = binned_frame(run, 0, bins=5)
        self.assertEqual(len(frame), 2 * 11 * 5)


if __name__ == '__main__':
    unittest.main()
