#!/usr/bin/env python3
"""
Tests for adversarial losses and the two trainers
"""

import copy
import os
import unittest

import numpy as np

from core import diffcore as dc
from core.datapipe import load_oracle
from core.errors import ConfigError, TrainingDivergedError
from core.netlib import flatten
from core.training import (
    LATENT_DIM,
    BiGANTrainer,
    ConditionalGANTrainer,
    TrainConfig,
    cycle_loss,
    gradient_penalty,
    hinge_losses,
    split_equity_rows,
    train_bigan,
    wasserstein_losses,
)

ORACLE_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "oracle.json")


def small_config(**overrides):
    values = dict(steps=3, batch_size=8, seed=21, log_every=0, finalize_batches=2)
    values.update(overrides)
    return TrainConfig(**values)


def equity_rows(n, seed=0):
    rng = np.random.default_rng(seed)
    levels = rng.uniform(1.0, 50.0, size=(n, 11))
    d_eqv = rng.normal(0.0, 0.05, size=(n, 11))
    d_stv = rng.normal(0.0, 0.1, size=(n, 7))
    return np.hstack([levels, d_eqv, d_stv])


class TestLosses(unittest.TestCase):
    """Loss formulas"""

    def test_hinge_values(self):
        l_d, l_g = hinge_losses(np.array([2.0, 0.5]), np.array([-2.0, 0.5]))
        self.assertAlmostEqual(l_d.item(), 1.0)
        self.assertAlmostEqual(l_g.item(), 0.75)

    def test_wasserstein_values(self):
        l_d, l_g = wasserstein_losses(np.array([1.0, 3.0]), np.array([0.0, 1.0]))
        self.assertAlmostEqual(l_d.item(), 0.5 - 2.0)
        self.assertAlmostEqual(l_g.item(), -0.5)

    def test_hinge_at_zero_scores(self):
        l_d, l_g = hinge_losses(np.zeros(4), np.zeros(4))
        self.assertEqual(l_d.item(), 2.0)
        self.assertEqual(l_g.item(), 0.0)

    def test_penalty_of_doubled_sum_critic(self):
        critic = lambda xs: dc.scale(dc.reduce_sum(xs[0], axes=1), 2.0)
        rng = np.random.default_rng(3)
        for dim in (1, 3, 7):
            gp = gradient_penalty(critic, [rng.standard_normal((6, dim))], [rng.standard_normal((6, dim))],
                                  10.0, dc.philox_rng(3))
            self.assertAlmostEqual(gp.item(), 10.0 * (2.0 * np.sqrt(dim) - 1.0) ** 2, places=6)

    def test_wasserstein_critic_loss_by_terms(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal(3), rng.standard_normal(2)
        critic = lambda xs: dc.add(dc.matmul(xs[0], dc.constant(a[:, None])),
                                   dc.matmul(xs[1], dc.constant(b[:, None])))
        real = [rng.standard_normal((5, 3)), rng.standard_normal((5, 2))]
        fake = [rng.standard_normal((5, 3)), rng.standard_normal((5, 2))]
        l_d, _ = wasserstein_losses(critic(real), critic(fake))
        gp = gradient_penalty(critic, real, fake, 10.0, dc.philox_rng(4))
        d_real = real[0] @ a + real[1] @ b
        d_fake = fake[0] @ a + fake[1] @ b
        penalty = 10.0 * (np.sqrt(a @ a + b @ b) - 1.0) ** 2
        self.assertAlmostEqual(l_d.item(), d_fake.mean() - d_real.mean(), places=12)
        self.assertAlmostEqual(gp.item(), penalty, places=8)
        self.assertAlmostEqual(dc.add(l_d, gp).item(), d_fake.mean() - d_real.mean() + penalty, places=8)

    def test_cycle_loss_of_inverse_pair_is_zero(self):
        rng = np.random.default_rng(0)
        identity = lambda t: t
        loss = cycle_loss(rng.standard_normal((4, 7)), rng.standard_normal((4, 8)), identity, identity)
        self.assertEqual(loss.item(), 0.0)

    def test_penalty_of_constant_critic(self):
        rng = np.random.default_rng(1)
        critic = lambda xs: dc.constant(np.ones((5, 1)))
        gp = gradient_penalty(critic, [rng.standard_normal((5, 3))], [rng.standard_normal((5, 3))],
                              10.0, dc.philox_rng(1))
        self.assertAlmostEqual(gp.item(), 10.0, places=4)

    def test_penalty_of_unit_slope_critic_vanishes(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((3, 1))
        w /= np.linalg.norm(w)
        critic = lambda xs: dc.matmul(xs[0], dc.constant(w))
        gp = gradient_penalty(critic, [rng.standard_normal((6, 3))], [rng.standard_normal((6, 3))],
                              10.0, dc.philox_rng(2))
        self.assertAlmostEqual(gp.item(), 0.0, places=8)


class TestConfig(unittest.TestCase):
    """Training configuration checks"""

    def test_seed_required(self):
        with self.assertRaises(ConfigError):
            TrainConfig().validate()

    def test_bad_loss_mode(self):
        with self.assertRaises(ConfigError):
            small_config(loss_mode="lsgan").validate()

    def test_cycle_weight_range(self):
        with self.assertRaises(ConfigError):
            small_config(cycle_weight=1.5).validate()

    def test_fingerprint_tracks_values(self):
        self.assertEqual(small_config().fingerprint(), small_config().fingerprint())
        self.assertNotEqual(small_config().fingerprint(), small_config(steps=4).fingerprint())


class TestBiGANTrainer(unittest.TestCase):
    """State BiGAN training loop"""

    def setUp(self):
        self.data = np.random.default_rng(3).normal(size=(40, 7))

    def test_records_loss_terms(self):
        part, state = train_bigan(self.data, small_config())
        self.assertEqual(state.step, 3)
        self.assertEqual(sorted(state.history), ["cycle", "d_loss", "g_loss"])
        frame = state.history_frame()
        self.assertEqual(list(frame.columns), ["step", "term", "value"])
        self.assertEqual(len(frame), 9)
        self.assertEqual(part.fingerprint["steps"], 3)
        self.assertTrue(state.spectral_audit)

    def test_same_seed_same_history(self):
        _, a = train_bigan(self.data, small_config(steps=2))
        _, b = train_bigan(self.data, small_config(steps=2))
        self.assertEqual(a.history, b.history)

    def test_zero_cycle_weight_records_zero(self):
        _, state = train_bigan(self.data, small_config(steps=1, cycle_weight=0.0))
        self.assertEqual(state.history["cycle"], [0.0])

    def test_wgan_mode_records_penalty(self):
        trainer = BiGANTrainer(self.data, small_config(steps=1, loss_mode="wgan-gp"))
        trainer.train()
        self.assertIn("gp", trainer.state.history)
        self.assertFalse(trainer.disc_sz.spectral_enabled)

    def test_snapshot_restore(self):
        trainer = BiGANTrainer(self.data, small_config(steps=2))
        snapshot = trainer.snapshot()
        trainer.train()
        first = copy.deepcopy(trainer.state.history)
        trainer.restore(snapshot)
        self.assertEqual(trainer.state.step, 0)
        self.assertEqual(trainer.state.history, {})
        trainer.train()
        self.assertEqual(trainer.state.history, first)

    def test_wgan_step_terms_match_an_independent_evaluation(self):
        trainer = BiGANTrainer(self.data, small_config(steps=1, loss_mode="wgan-gp", gp_weight=5.0))
        replica = copy.deepcopy(trainer)
        terms = trainer.step()

        rng, batch = replica.state.rng, replica.config.batch_size
        x = replica.data[replica._sample_rows(len(replica.data))]
        z = rng.standard_normal((batch, LATENT_DIM))
        with dc.no_grad():
            ez = replica._encode(x).data
            gz = replica._generate(z).data

            def critic(xs, zs):
                return replica._discriminate([xs, zs]).data.reshape(-1)

            scores = critic(np.vstack([x, gz]), np.vstack([ez, z]))
            eps = rng.uniform(size=(batch, 1))
            x_hat = eps * x + (1.0 - eps) * gz
            z_hat = eps * ez + (1.0 - eps) * z
            h = 1e-6
            columns = []
            for block, other, first in ((x_hat, z_hat, True), (z_hat, x_hat, False)):
                for j in range(block.shape[1]):
                    up, down = block.copy(), block.copy()
                    up[:, j] += h
                    down[:, j] -= h
                    plus = critic(up, other) if first else critic(other, up)
                    minus = critic(down, other) if first else critic(other, down)
                    columns.append((plus - minus) / (2 * h))
        norms = np.linalg.norm(np.column_stack(columns), axis=1)
        penalty = 5.0 * np.mean((norms - 1.0) ** 2)
        wasserstein = scores[batch:].mean() - scores[:batch].mean()

        self.assertAlmostEqual(terms["gp"], penalty, delta=1e-5 * max(1.0, penalty))
        self.assertAlmostEqual(terms["d_loss"] - terms["gp"], wasserstein, places=9)

    def test_held_out_cycle_loss_halves(self):
        oracle = load_oracle(ORACLE_PATH)
        rng = np.random.default_rng(30)
        transitions = oracle.sample_state_transitions(800, rng)
        trainer = BiGANTrainer(transitions[:600], small_config(steps=400, batch_size=32, cycle_weight=1.0,
                                                              lr_g=1e-3))
        x = trainer.standardizer.transform(transitions[600:])
        z = rng.standard_normal((len(x), LATENT_DIM))

        def held_out():
            generate = lambda t: flatten(trainer.gen_s(t, mode="train", update_running=False))
            encode = lambda t: flatten(trainer.enc_z(t, mode="train", update_running=False))
            with dc.no_grad():
                return cycle_loss(x, z, generate, encode).item()

        untrained = held_out()
        trainer.train()
        self.assertLessEqual(held_out(), 0.5 * untrained)

    def test_skipped_step_rolls_back_the_discriminator(self):
        trainer = BiGANTrainer(self.data, small_config())
        update = trainer._update

        def generator_fails(loss, params, optimizer):
            if optimizer == "generator":
                raise FloatingPointError("generator")
            update(loss, params, optimizer)

        before = {name: network.tensors() for name, network in trainer._all_networks().items()}
        before = {name: {k: v.copy() for k, v in t.items()} for name, t in before.items()}
        trainer._update = generator_fails
        self.assertEqual(trainer.step(), {})
        self.assertEqual(trainer.state.skipped, 1)
        self.assertEqual(trainer.state.step, 0)
        for name, network in trainer._all_networks().items():
            for key, value in network.tensors().items():
                np.testing.assert_array_equal(value, before[name][key], err_msg=f"{name}:{key}")
        discriminator = trainer.state.optimizers["discriminator"]
        self.assertEqual(discriminator.step, 0)
        self.assertEqual(discriminator.first_moment, {})

        del trainer._update
        trainer.step()
        self.assertEqual(trainer.state.optimizers["discriminator"].step, 1)
        self.assertFalse(np.array_equal(trainer.disc_sz.parameters["out.weight"].data,
                                        before["disc_sz"]["out.weight"]))

    def test_diverged_after_consecutive_non_finite_steps(self):
        trainer = BiGANTrainer(self.data, small_config(max_nonfinite=3))

        def broken():
            raise FloatingPointError("discriminator")

        trainer._step_terms = broken
        trainer.step()
        trainer.step()
        self.assertEqual(trainer.state.step, 0)
        self.assertEqual(trainer.state.skipped, 2)
        with self.assertRaises(TrainingDivergedError):
            trainer.step()


class TestConditionalTrainer(unittest.TestCase):
    """Conditional instrument GAN training loop"""

    def test_split_columns(self):
        condition, target = split_equity_rows(equity_rows(5))
        self.assertEqual(condition.shape, (5, 18))
        self.assertEqual(target.shape, (5, 10))

    def test_training_steps(self):
        trainer = ConditionalGANTrainer(equity_rows(30), small_config(steps=2))
        trainer.train()
        trainer.finalize()
        part = trainer.part()
        self.assertEqual(trainer.state.step, 2)
        self.assertEqual(part.condition.mean.shape, (18,))
        self.assertEqual(part.target.mean.shape, (10,))
        self.assertEqual(part.reference_levels.shape, (1, 11))


if __name__ == '__main__':
    unittest.main()
