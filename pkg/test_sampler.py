#!/usr/bin/env python3
"""
Tests for scenario boxes and the box-conditioned latent sampler
"""

import unittest

import numpy as np

from core import diffcore as dc
from core.errors import ConfigError, InfeasibleScenarioError, ShapeMismatchError
from core.sampler import (
    ChainConfig,
    ScenarioBox,
    encoder_init,
    mh_sample_conditioned,
    stv_index,
    window_indicator,
)


def linear_generator(z):
    return np.asarray(z)[:, :7]


def fast_chain(**overrides):
    values = dict(proposal_std=0.5, burn_in=100, thinning=3, chains=4, seed=13)
    values.update(overrides)
    return ChainConfig(**values)


class TestScenarioBox(unittest.TestCase):
    """Box parsing and the window indicator"""

    def test_indicator_closed_intervals(self):
        box = ScenarioBox.from_mapping({"stv1": [-1.0, 1.0]})
        self.assertEqual(window_indicator([1.0, 0, 0, 0, 0, 0, 0], box), 1)
        self.assertEqual(window_indicator([1.01, 0, 0, 0, 0, 0, 0], box), 0)
        rows = np.array([[0.0] * 7, [-2.0] + [0.0] * 6])
        np.testing.assert_array_equal(window_indicator(rows, box), [1, 0])

    def test_unbounded_box_accepts_everything(self):
        box = ScenarioBox.unbounded()
        self.assertTrue(box.is_unbounded)
        self.assertEqual(window_indicator(np.full(7, 1e9), box), 1)

    def test_one_sided_bounds(self):
        box = ScenarioBox.from_mapping({"STV_4": [None, 0.0]})
        self.assertEqual(box.to_mapping(), {"stv4": [None, 0.0]})
        self.assertTrue(np.isneginf(box.lo[3]))
        self.assertEqual(window_indicator([0, 0, 0, 0.5, 0, 0, 0], box), 0)

    def test_variable_names(self):
        self.assertEqual(stv_index("stv3"), 2)
        self.assertEqual(stv_index("DSTV_7"), 6)
        with self.assertRaises(ConfigError):
            stv_index("stv8")
        with self.assertRaises(ConfigError):
            stv_index("vix")

    def test_inverted_interval(self):
        with self.assertRaises(ConfigError):
            ScenarioBox.from_mapping({"stv2": [1.0, -1.0]})

    def test_indicator_checks_width(self):
        with self.assertRaises(ShapeMismatchError):
            window_indicator(np.zeros(6), ScenarioBox())


class TestSampler(unittest.TestCase):
    """Random-walk Metropolis restricted to a box"""

    def test_samples_stay_inside_box(self):
        box = ScenarioBox.from_mapping({"stv1": [-0.5, 0.5], "stv3": [0.2, None]})
        result = mh_sample_conditioned(linear_generator, box, 200, fast_chain())
        self.assertEqual(result.samples.shape, (200, 7))
        self.assertEqual(result.latents.shape, (200, 8))
        self.assertTrue(np.all(window_indicator(result.samples, box) == 1))
        np.testing.assert_array_equal(result.samples, result.latents[:, :7])
        self.assertGreater(result.acceptance_rate, 0.0)

    def test_unbounded_box_recovers_prior(self):
        result = mh_sample_conditioned(linear_generator, ScenarioBox(), 2000,
                                       fast_chain(proposal_std=1.0, thinning=5, burn_in=200))
        self.assertLess(np.max(np.abs(result.samples.mean(axis=0))), 0.25)
        self.assertLess(np.max(np.abs(result.samples.std(axis=0) - 1.0)), 0.25)

    def test_same_seed_same_chain(self):
        box = ScenarioBox.from_mapping({"stv2": [0.0, 1.0]})
        a = mh_sample_conditioned(linear_generator, box, 50, fast_chain())
        b = mh_sample_conditioned(linear_generator, box, 50, fast_chain())
        np.testing.assert_array_equal(a.samples, b.samples)
        c = mh_sample_conditioned(linear_generator, box, 50, fast_chain(seed=14))
        self.assertFalse(np.array_equal(a.samples, c.samples))

    def test_infeasible_box(self):
        box = ScenarioBox.from_mapping({"stv1": [100.0, 101.0]})
        with self.assertRaises(InfeasibleScenarioError):
            mh_sample_conditioned(linear_generator, box, 10, fast_chain(max_init_attempts=500))

    def test_encoder_start_inside_box(self):
        box = ScenarioBox.from_mapping({"stv1": [3.0, 3.5]})
        pool = np.zeros((5, 7))
        pool[2, 0] = 3.2
        encoder = lambda ds: np.hstack([ds, np.zeros((len(ds), 1))])
        z0 = encoder_init(box, linear_generator, encoder, pool, fast_chain(), dc.philox_rng(1))
        self.assertAlmostEqual(z0[0], 3.2)

    def test_seed_required(self):
        with self.assertRaises(ConfigError):
            mh_sample_conditioned(linear_generator, ScenarioBox(), 5, ChainConfig())


if __name__ == '__main__':
    unittest.main()
