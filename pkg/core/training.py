"""
Adversarial losses and the two training loops.

``BiGANTrainer`` fits the state generator S and encoder Z against the joint
discriminator on state transitions; ``ConditionalGANTrainer`` fits the
conditional generator E on instrument transitions given
(instrument levels, state transition).
"""

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import diffcore as dc
from core.datapipe import DEQV_SLICE, DSTV_SLICE, EQV_SLICE, Standardizer
from core.errors import ConfigError, NumericOverflowError, ShapeMismatchError, TrainingDivergedError
from core.model_store import EquityPart, StatePart
from core.netlib import Network, build_standard, finalize_batchnorm, flatten

logger = logging.getLogger(__name__)

LOSS_MODES = ("hinge", "wgan-gp")
TARGET_DIM = 10  # generated instrument transitions; the 11th (volatility) is not modelled
LATENT_DIM = 8


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "hinge"
    steps: int = 2000
    batch_size: int = 64
    lr_d: float = 2e-4
    lr_g: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    cycle_weight: float = 0.1
    gp_weight: float = 10.0
    d_steps: int = 1
    seed: Optional[int] = None
    checkpoint_every: int = 0
    log_every: int = 100
    clip_norm: float = 10.0
    max_nonfinite: int = 100
    finalize_batches: int = 20

    def validate(self) -> "TrainConfig":
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got '{self.loss_mode}'")
        if self.seed is None:
            raise ConfigError("a seed is required for training")
        if not 0.0 <= self.cycle_weight <= 1.0:
            raise ConfigError(f"cycle_weight must lie in [0, 1], got {self.cycle_weight}")
        if self.gp_weight < 0:
            raise ConfigError("gp_weight must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.steps < 0 or self.d_steps < 1 or self.checkpoint_every < 0:
            raise ConfigError("steps, d_steps and checkpoint_every must be non-negative (d_steps >= 1)")
        if self.lr_d <= 0 or self.lr_g <= 0:
            raise ConfigError("learning rates must be positive")
        return self

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainerState:
    step: int = 0
    history: Dict[str, List[float]] = field(default_factory=dict)
    optimizers: Dict[str, dc.AdamState] = field(default_factory=dict)
    rng: Optional[np.random.Generator] = None
    nonfinite_streak: int = 0
    skipped: int = 0
    spectral_audit: bool = True
    last_checkpoint: Optional[str] = None

    def record(self, terms: Dict[str, float]):
        for name, value in terms.items():
            self.history.setdefault(name, []).append(float(value))
        self.step += 1

    def history_frame(self) -> pd.DataFrame:
        rows = [
            (step + 1, term, value)
            for term, series in sorted(self.history.items())
            for step, value in enumerate(series)
        ]
        return pd.DataFrame(rows, columns=["step", "term", "value"]).sort_values(["step", "term"], ignore_index=True)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _scores(scores) -> dc.Tensor:
    t = dc.as_tensor(scores)
    if t.size == 0:
        raise ShapeMismatchError("loss", t.shape)
    return dc.reshape(t, (t.shape[0],)) if t.ndim > 1 else t


def hinge_losses(d_real, d_fake) -> Tuple[dc.Tensor, dc.Tensor]:
    """Hinge discriminator loss and generator loss ``-mean(d_fake)``"""
    d_real, d_fake = _scores(d_real), _scores(d_fake)
    if d_real.shape != d_fake.shape:
        raise ShapeMismatchError("hinge_losses", (d_real.shape, d_fake.shape))
    real_term = dc.reduce_mean(dc.min_const(dc.add_const(d_real, -1.0), 0.0))
    fake_term = dc.reduce_mean(dc.min_const(dc.add_const(dc.scale(d_fake, -1.0), -1.0), 0.0))
    l_d = dc.scale(dc.add(real_term, fake_term), -1.0)
    l_g = dc.scale(dc.reduce_mean(d_fake), -1.0)
    return l_d, l_g


def wasserstein_losses(d_real, d_fake) -> Tuple[dc.Tensor, dc.Tensor]:
    """Critic loss ``mean(d_fake) - mean(d_real)`` (penalty added separately)"""
    d_real, d_fake = _scores(d_real), _scores(d_fake)
    if d_real.shape != d_fake.shape:
        raise ShapeMismatchError("wasserstein_losses", (d_real.shape, d_fake.shape))
    l_d = dc.subtract(dc.reduce_mean(d_fake), dc.reduce_mean(d_real))
    return l_d, dc.scale(dc.reduce_mean(d_fake), -1.0)


def _rows(t) -> dc.Tensor:
    t = dc.as_tensor(t)
    return flatten(t) if t.ndim > 2 else t


def cycle_loss(x, z, generator: Callable, encoder: Callable) -> dc.Tensor:
    """Per-element mean L1 reconstruction error in data and latent space"""
    x, z = _rows(x), _rows(z)
    data_term = dc.reduce_mean(dc.absolute(dc.subtract(x, _rows(generator(encoder(x))))))
    latent_term = dc.reduce_mean(dc.absolute(dc.subtract(z, _rows(encoder(generator(z))))))
    return dc.add(data_term, latent_term)


def gradient_penalty(discriminator: Callable, real: Sequence, fake: Sequence, weight: float,
                     rng: np.random.Generator, fixed: Sequence = ()) -> dc.Tensor:
    """``weight * mean((||grad D(x_hat)||_2 - 1)^2)`` at random interpolates.

    One mixing coefficient per row is shared by every interpolated input;
    ``fixed`` inputs (a condition) are passed through unchanged.
    """
    real = [np.asarray(dc.as_tensor(r).data, dtype=np.float64) for r in real]
    fake = [np.asarray(dc.as_tensor(f).data, dtype=np.float64) for f in fake]
    if len(real) != len(fake) or any(r.shape != f.shape for r, f in zip(real, fake)):
        raise ShapeMismatchError("gradient_penalty", ([r.shape for r in real], [f.shape for f in fake]))
    batch = real[0].shape[0]
    eps = rng.uniform(size=(batch,))

    def mix(r, f):
        e = eps.reshape((batch,) + (1,) * (r.ndim - 1))
        return e * r + (1.0 - e) * f

    points = {str(i): dc.Tensor(mix(r, f), requires_grad=True) for i, (r, f) in enumerate(zip(real, fake))}
    scores = dc.reduce_sum(discriminator([points[str(i)] for i in range(len(real))] + list(fixed)))
    if scores.node is None:
        grads = [np.zeros((batch, int(np.prod(p.shape[1:])))) for p in points.values()]
        flat = dc.constant(np.concatenate(grads, axis=1))
    else:
        grads = dc.backward(scores, points, create_graph=True)
        flat = dc.concat([_rows(grads[str(i)]) for i in range(len(real))], axis=1)
    norms = dc.l2_norm(flat, axes=1)
    return dc.scale(dc.reduce_mean(dc.power(dc.add_const(norms, -1.0), 2.0)), weight)


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------

def _namespaced(networks: Dict[str, Network]) -> Dict[str, dc.Tensor]:
    return {f"{net_id}/{name}": p for net_id, net in networks.items() for name, p in net.parameters.items()}


class AdversarialTrainer:
    """Shared loop: alternating discriminator and generator updates with a NaN guard"""

    def __init__(self, config: TrainConfig, checkpoint: Optional[Callable[["AdversarialTrainer"], str]] = None):
        self.config = config.validate()
        self.checkpoint = checkpoint
        self.state = TrainerState(rng=dc.philox_rng(config.seed, 1000))
        self.state.optimizers = {
            "discriminator": dc.AdamState(lr=config.lr_d, beta1=config.beta1, beta2=config.beta2),
            "generator": dc.AdamState(lr=config.lr_g, beta1=config.beta1, beta2=config.beta2),
        }

    # subclasses provide these
    @property
    def discriminator(self) -> Network:
        raise NotImplementedError

    def _step_terms(self) -> Dict[str, float]:
        raise NotImplementedError

    def _update(self, loss: dc.Tensor, params: Dict[str, dc.Tensor], optimizer: str) -> None:
        if not np.isfinite(loss.item()):
            raise FloatingPointError(optimizer)
        grads = dc.backward(loss, params)
        dc.clip_grad_norm(grads, self.config.clip_norm)
        dc.adam_step(params, grads, self.state.optimizers[optimizer])

    def _discriminator_loss(self, d_real, d_fake) -> dc.Tensor:
        if self.config.loss_mode == "hinge":
            return hinge_losses(d_real, d_fake)[0]
        return wasserstein_losses(d_real, d_fake)[0]

    def step(self) -> Dict[str, float]:
        """Run one training step; returns the recorded loss terms.

        A step that hits a non-finite value is rolled back as a whole: the
        discriminator update it may already have applied is undone together
        with the optimizer moments. The sampling stream still advances.
        """
        saved = self._capture()
        try:
            terms = self._step_terms()
        except (FloatingPointError, NumericOverflowError) as e:
            self._rewind(saved)
            self.state.nonfinite_streak += 1
            self.state.skipped += 1
            logger.warning("step %d: non-finite loss (%s), skipping (%d in a row)",
                           self.state.step + 1, e, self.state.nonfinite_streak)
            if self.state.nonfinite_streak >= self.config.max_nonfinite:
                raise TrainingDivergedError(
                    f"{self.state.nonfinite_streak} consecutive non-finite losses",
                    self.state.last_checkpoint) from None
            return {}
        self.state.nonfinite_streak = 0
        self.state.record(terms)
        step = self.state.step
        if self.config.log_every and step % self.config.log_every == 0:
            logger.info("step %d: %s", step, ", ".join(f"{k}={v:.5f}" for k, v in terms.items()))
        if self.checkpoint and self.config.checkpoint_every and step % self.config.checkpoint_every == 0:
            self.state.last_checkpoint = self.checkpoint(self)
        return terms

    def train(self, steps: Optional[int] = None) -> TrainerState:
        target = self.state.step + (self.config.steps if steps is None else steps)
        while self.state.step < target:
            self.step()
        return self.state

    def snapshot(self) -> dict:
        return copy.deepcopy({"networks": self._all_networks(), "state": self.state})

    def restore(self, snapshot: dict) -> None:
        snapshot = copy.deepcopy(snapshot)
        for name, network in snapshot["networks"].items():
            setattr(self, name, network)
        self.state = snapshot["state"]

    def _all_networks(self) -> Dict[str, Network]:
        raise NotImplementedError

    def _capture(self):
        tensors = {name: {k: np.array(v, copy=True) for k, v in network.tensors().items()}
                   for name, network in self._all_networks().items()}
        optimizers = {name: replace(opt, first_moment=dict(opt.first_moment), second_moment=dict(opt.second_moment))
                      for name, opt in self.state.optimizers.items()}
        return tensors, optimizers

    def _rewind(self, saved) -> None:
        tensors, optimizers = saved
        for name, network in self._all_networks().items():
            network.load_tensors(tensors[name])
        self.state.optimizers = optimizers

    def _sample_rows(self, n: int) -> np.ndarray:
        return self.state.rng.choice(n, size=self.config.batch_size, replace=n < self.config.batch_size)

    def export_history(self, path: str) -> None:
        self.state.history_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info("wrote loss history %s", path)


class BiGANTrainer(AdversarialTrainer):
    """Joint training of S, Z and the (data, latent) discriminator"""

    def __init__(self, data: np.ndarray, config: TrainConfig, checkpoint=None):
        super().__init__(config, checkpoint)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != 7 or data.shape[0] < 2:
            raise ShapeMismatchError("train_bigan", data.shape)
        self.standardizer = Standardizer.fit(data)
        self.data = self.standardizer.transform(data)
        self.gen_s = build_standard("gen_S", config.seed, 1)
        self.enc_z = build_standard("enc_Z", config.seed, 2)
        self.disc_sz = build_standard("disc_SZ", config.seed, 3)
        self.disc_sz.spectral_enabled = config.loss_mode == "hinge"

    @property
    def discriminator(self) -> Network:
        return self.disc_sz

    def _all_networks(self) -> Dict[str, Network]:
        return {"gen_s": self.gen_s, "enc_z": self.enc_z, "disc_sz": self.disc_sz}

    def _generate(self, z) -> dc.Tensor:
        return flatten(self.gen_s(z, mode="train"))

    def _encode(self, x) -> dc.Tensor:
        return flatten(self.enc_z(x, mode="train"))

    def _discriminate(self, inputs, update_spectral=False) -> dc.Tensor:
        return self.disc_sz(inputs, mode="train", update_spectral=update_spectral)

    def _step_terms(self) -> Dict[str, float]:
        cfg, rng = self.config, self.state.rng
        batch = cfg.batch_size
        terms: Dict[str, float] = {}

        for _ in range(cfg.d_steps):
            x = self.data[self._sample_rows(len(self.data))]
            z = rng.standard_normal((batch, LATENT_DIM))
            with dc.no_grad():
                ez = self._encode(x).data
                gz = self._generate(z).data
            scores = self._discriminate([np.vstack([x, gz]), np.vstack([ez, z])], update_spectral=True)
            scores = dc.reshape(scores, (2 * batch,))
            d_real = dc.take(scores, np.arange(batch))
            d_fake = dc.take(scores, np.arange(batch, 2 * batch))
            l_d = self._discriminator_loss(d_real, d_fake)
            if cfg.loss_mode == "wgan-gp":
                gp = gradient_penalty(lambda xs: self._discriminate(xs), [x, ez], [gz, z], cfg.gp_weight, rng)
                terms["gp"] = gp.item()
                l_d = dc.add(l_d, gp)
            else:
                self.state.spectral_audit &= self.disc_sz.last_forward_spectral
            self._update(l_d, self.disc_sz.parameters, "discriminator")
        terms["d_loss"] = l_d.item()

        x = self.data[self._sample_rows(len(self.data))]
        z = rng.standard_normal((batch, LATENT_DIM))
        ez = self._encode(x)
        gz = self._generate(z)
        scores = dc.reshape(self._discriminate([dc.concat([dc.constant(x), gz], 0),
                                                dc.concat([ez, dc.constant(z)], 0)]), (2 * batch,))
        l_eg = dc.subtract(dc.reduce_mean(dc.take(scores, np.arange(batch))),
                           dc.reduce_mean(dc.take(scores, np.arange(batch, 2 * batch))))
        alpha = cfg.cycle_weight
        total = l_eg
        weighted_cycle = 0.0
        if alpha > 0:
            l_c = cycle_loss(x, z, self._generate, self._encode)
            total = dc.add(dc.scale(l_eg, 1.0 - alpha), dc.scale(l_c, alpha))
            weighted_cycle = alpha * l_c.item()
        self._update(total, _namespaced({"gen_S": self.gen_s, "enc_Z": self.enc_z}), "generator")
        terms["g_loss"] = l_eg.item()
        terms["cycle"] = weighted_cycle
        return terms

    def finalize(self) -> None:
        rng = dc.philox_rng(self.config.seed, 2000)
        n = self.config.finalize_batches
        latents = [rng.standard_normal((self.config.batch_size, LATENT_DIM)) for _ in range(n)]
        finalize_batchnorm(self.gen_s, latents)
        rows = [self.data[rng.choice(len(self.data), size=self.config.batch_size,
                                     replace=len(self.data) < self.config.batch_size)] for _ in range(n)]
        finalize_batchnorm(self.enc_z, rows)

    def part(self) -> StatePart:
        return StatePart(self.gen_s, self.enc_z, self.disc_sz, self.standardizer,
                         {"config_sha256": self.config.fingerprint(), "steps": self.state.step})


def split_equity_rows(d_e: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(condition, target) columns of D_E rows: condition = (levels, state transition)"""
    d_e = np.asarray(d_e, dtype=np.float64)
    if d_e.ndim != 2 or d_e.shape[1] != 29:
        raise ShapeMismatchError("train_cgan", d_e.shape)
    condition = np.hstack([d_e[:, EQV_SLICE], d_e[:, DSTV_SLICE]])
    target = d_e[:, DEQV_SLICE][:, :TARGET_DIM]
    return condition, target


class ConditionalGANTrainer(AdversarialTrainer):
    """Training of E against the conditional discriminator"""

    def __init__(self, d_e: np.ndarray, config: TrainConfig, checkpoint=None,
                 scaling: Optional[Dict[str, Tuple[float, float]]] = None,
                 reference_levels: Optional[np.ndarray] = None):
        super().__init__(config, checkpoint)
        condition, target = split_equity_rows(d_e)
        if len(condition) < 2:
            raise ShapeMismatchError("train_cgan", condition.shape)
        self.condition_std = Standardizer.fit(condition)
        self.target_std = Standardizer.fit(target)
        self.condition = self.condition_std.transform(condition)
        self.target = self.target_std.transform(target)
        self.scaling = dict(scaling or {})
        self.reference_levels = (np.asarray(reference_levels, dtype=np.float64)
                                 if reference_levels is not None else d_e[:1, EQV_SLICE].copy())
        self.gen_e = build_standard("gen_E", config.seed, 4)
        self.disc_e = build_standard("disc_E", config.seed, 5)
        self.disc_e.spectral_enabled = config.loss_mode == "hinge"

    @property
    def discriminator(self) -> Network:
        return self.disc_e

    def _all_networks(self) -> Dict[str, Network]:
        return {"gen_e": self.gen_e, "disc_e": self.disc_e}

    def _generate(self, z, c) -> dc.Tensor:
        return flatten(self.gen_e([z, c], mode="train"))

    def _step_terms(self) -> Dict[str, float]:
        cfg, rng = self.config, self.state.rng
        batch = cfg.batch_size
        terms: Dict[str, float] = {}

        for _ in range(cfg.d_steps):
            idx = self._sample_rows(len(self.target))
            c, x = self.condition[idx], self.target[idx]
            z = rng.standard_normal((batch, LATENT_DIM))
            with dc.no_grad():
                fake = self._generate(z, c).data
            scores = self.disc_e([np.vstack([x, fake]), np.vstack([c, c])], mode="train", update_spectral=True)
            scores = dc.reshape(scores, (2 * batch,))
            l_d = self._discriminator_loss(dc.take(scores, np.arange(batch)),
                                           dc.take(scores, np.arange(batch, 2 * batch)))
            if cfg.loss_mode == "wgan-gp":
                gp = gradient_penalty(lambda xs: self.disc_e(xs, mode="train"), [x], [fake],
                                      cfg.gp_weight, rng, fixed=[c])
                terms["gp"] = gp.item()
                l_d = dc.add(l_d, gp)
            else:
                self.state.spectral_audit &= self.disc_e.last_forward_spectral
            self._update(l_d, self.disc_e.parameters, "discriminator")
        terms["d_loss"] = l_d.item()

        idx = self._sample_rows(len(self.target))
        c = self.condition[idx]
        z = rng.standard_normal((batch, LATENT_DIM))
        fake = self._generate(z, c)
        l_g = dc.scale(dc.reduce_mean(self.disc_e([fake, c], mode="train")), -1.0)
        self._update(l_g, _namespaced({"gen_E": self.gen_e}), "generator")
        terms["g_loss"] = l_g.item()
        return terms

    def finalize(self) -> None:
        rng = dc.philox_rng(self.config.seed, 3000)
        batches = []
        for _ in range(self.config.finalize_batches):
            idx = rng.choice(len(self.condition), size=self.config.batch_size,
                             replace=len(self.condition) < self.config.batch_size)
            batches.append([rng.standard_normal((self.config.batch_size, LATENT_DIM)), self.condition[idx]])
        finalize_batchnorm(self.gen_e, batches)

    def part(self) -> EquityPart:
        return EquityPart(self.gen_e, self.disc_e, self.condition_std, self.target_std, self.scaling,
                          self.reference_levels,
                          {"config_sha256": self.config.fingerprint(), "steps": self.state.step})


def train_bigan(d_s: np.ndarray, config: TrainConfig, checkpoint=None) -> Tuple[StatePart, TrainerState]:
    trainer = BiGANTrainer(d_s, config, checkpoint)
    trainer.train()
    trainer.finalize()
    return trainer.part(), trainer.state


def train_cgan(d_e: np.ndarray, config: TrainConfig, checkpoint=None, scaling=None,
               reference_levels=None) -> Tuple[EquityPart, TrainerState]:
    trainer = ConditionalGANTrainer(d_e, config, checkpoint, scaling, reference_levels)
    trainer.train()
    trainer.finalize()
    return trainer.part(), trainer.state
