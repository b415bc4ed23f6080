"""
Scenario-conditioned sampling of state transitions.

Random-walk Metropolis runs in the latent space of the state generator S
with target density proportional to N(0, I)(z) times the indicator that
S(z) falls inside the scenario box. Proposals whose image leaves the box
have zero density and are rejected outright.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from core import diffcore as dc
from core.datapipe import N_STV
from core.errors import ConfigError, InfeasibleScenarioError, ShapeMismatchError

logger = logging.getLogger(__name__)

LATENT_DIM = 8
LOW_ACCEPTANCE = 0.01
INIT_CHUNK = 256

LatentMap = Callable[[np.ndarray], np.ndarray]

Bound = Optional[float]


@dataclass(frozen=True)
class ScenarioBox:
    """Closed per-variable intervals on the 7 state transitions; ``None`` is unbounded"""
    lower: Tuple[Bound, ...] = (None,) * N_STV
    upper: Tuple[Bound, ...] = (None,) * N_STV

    def __post_init__(self):
        if len(self.lower) != N_STV or len(self.upper) != N_STV:
            raise ConfigError(f"a scenario box needs {N_STV} intervals")
        for k, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if lo is not None and hi is not None and lo > hi:
                raise ConfigError(f"STV_{k + 1}: lower bound {lo} exceeds upper bound {hi}")

    @classmethod
    def unbounded(cls) -> "ScenarioBox":
        return cls()

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[Bound]]) -> "ScenarioBox":
        """Build from ``{"stv3": [-0.5, 0.5], ...}``; names are case-insensitive"""
        lower, upper = [None] * N_STV, [None] * N_STV
        for key, bounds in mapping.items():
            index = stv_index(key)
            if len(bounds) != 2:
                raise ConfigError(f"{key}: expected [lo, hi], got {bounds!r}")
            lower[index] = None if bounds[0] is None else float(bounds[0])
            upper[index] = None if bounds[1] is None else float(bounds[1])
        return cls(tuple(lower), tuple(upper))

    def to_mapping(self) -> Dict[str, list]:
        return {
            f"stv{k + 1}": [lo, hi]
            for k, (lo, hi) in enumerate(zip(self.lower, self.upper))
            if lo is not None or hi is not None
        }

    @property
    def lo(self) -> np.ndarray:
        return np.array([-np.inf if v is None else v for v in self.lower])

    @property
    def hi(self) -> np.ndarray:
        return np.array([np.inf if v is None else v for v in self.upper])

    @property
    def is_unbounded(self) -> bool:
        return all(v is None for v in self.lower + self.upper)


def stv_index(name: str) -> int:
    key = name.strip().lower()
    for prefix in ("dstv_", "stv_", "dstv", "stv"):
        if key.startswith(prefix) and key[len(prefix):].isdigit():
            index = int(key[len(prefix):]) - 1
            if 0 <= index < N_STV:
                return index
    raise ConfigError(f"'{name}' is not a state variable (stv1..stv{N_STV})")


def window_indicator(ds, box: ScenarioBox):
    """1 where every coordinate of ``ds`` lies in its closed interval, else 0.

    A single 7-vector gives an int; a (n, 7) matrix gives an int array.
    """
    ds = np.asarray(ds, dtype=np.float64)
    if ds.shape[-1] != N_STV:
        raise ShapeMismatchError("window_indicator", (ds.shape, N_STV))
    inside = np.all((ds >= box.lo) & (ds <= box.hi), axis=-1)
    return inside.astype(np.int64) if ds.ndim > 1 else int(inside)


@dataclass(frozen=True)
class ChainConfig:
    proposal_std: float = 0.1
    burn_in: int = 1000
    thinning: int = 10
    chains: int = 4
    max_init_attempts: int = 10000
    seed: Optional[int] = None

    def validate(self) -> "ChainConfig":
        if self.seed is None:
            raise ConfigError("a seed is required for sampling")
        if self.proposal_std <= 0 or self.chains < 1 or self.max_init_attempts < 1:
            raise ConfigError("proposal_std, chains and max_init_attempts must be positive")
        if self.thinning < 1 or self.burn_in < 0:
            raise ConfigError("thinning must be >= 1 and burn_in >= 0")
        return self


@dataclass
class ChainState:
    z: np.ndarray  # (chains, 8)
    ds: np.ndarray  # (chains, 7), always generator(z)
    log_target: np.ndarray  # (chains,)
    accepted: int = 0
    proposed: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


@dataclass
class MCMCResult:
    samples: np.ndarray  # (n, 7)
    latents: np.ndarray  # (n, 8)
    acceptance_rate: float
    burn_in_acceptance: float


def _log_prior(z: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(z * z, axis=-1)


def encoder_init(box: ScenarioBox, generator: LatentMap, encoder: Optional[LatentMap],
                 pool: Optional[np.ndarray], config: ChainConfig, rng: np.random.Generator) -> np.ndarray:
    """Starting latent whose image lies inside ``box``.

    Tries ``Z(ds0)`` for a random pool element ``ds0`` inside the box, then
    falls back to prior draws until one maps inside, within
    ``max_init_attempts`` draws.
    """
    if encoder is not None and pool is not None and len(pool):
        inside = np.flatnonzero(window_indicator(np.asarray(pool), box))
        if inside.size:
            ds0 = np.asarray(pool)[inside[rng.integers(inside.size)]]
            z0 = np.asarray(encoder(ds0[None, :]))[0]
            if window_indicator(np.asarray(generator(z0[None, :]))[0], box):
                return z0
            logger.debug("encoded pool element maps outside the box, falling back to prior draws")
        else:
            logger.debug("no pool element inside the box, falling back to prior draws")

    remaining = config.max_init_attempts
    while remaining > 0:
        size = min(INIT_CHUNK, remaining)
        z = rng.standard_normal((size, LATENT_DIM))
        hits = np.flatnonzero(window_indicator(np.asarray(generator(z)), box))
        if hits.size:
            return z[hits[0]]
        remaining -= size
    raise InfeasibleScenarioError(
        f"no latent found inside the scenario box {box.to_mapping()} after {config.max_init_attempts} draws")


def mh_sample_conditioned(generator: LatentMap, box: ScenarioBox, n_samples: int, config: ChainConfig,
                          encoder: Optional[LatentMap] = None, pool: Optional[np.ndarray] = None) -> MCMCResult:
    """Box-conditioned state transitions from independent random-walk chains.

    Chains advance in lockstep with one generator per chain; after burn-in
    every ``thinning``-th state is kept and the chains' draws are interleaved.
    """
    config.validate()
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")
    rngs = [dc.philox_rng(config.seed, chain) for chain in range(config.chains)]
    z = np.stack([encoder_init(box, generator, encoder, pool, config, rng) for rng in rngs])
    state = ChainState(z, np.asarray(generator(z), dtype=np.float64), _log_prior(z))

    per_chain = -(-n_samples // config.chains)
    kept_ds = np.empty((config.chains, per_chain, N_STV))
    kept_z = np.empty((config.chains, per_chain, LATENT_DIM))
    burn_in_accepted = 0
    total = config.burn_in + per_chain * config.thinning
    for it in range(total):
        eta = np.stack([rng.standard_normal(LATENT_DIM) for rng in rngs])
        log_u = np.log(np.array([rng.uniform() for rng in rngs]))
        proposal = state.z + config.proposal_std * eta
        proposal_ds = np.asarray(generator(proposal), dtype=np.float64)
        proposal_log = _log_prior(proposal)
        accept = window_indicator(proposal_ds, box).astype(bool) & (log_u < proposal_log - state.log_target)
        state.z = np.where(accept[:, None], proposal, state.z)
        state.ds = np.where(accept[:, None], proposal_ds, state.ds)
        state.log_target = np.where(accept, proposal_log, state.log_target)
        state.accepted += int(accept.sum())
        state.proposed += config.chains

        if it < config.burn_in:
            burn_in_accepted += int(accept.sum())
            if it == config.burn_in - 1:
                rate = burn_in_accepted / (config.burn_in * config.chains)
                if rate < LOW_ACCEPTANCE:
                    logger.warning("burn-in acceptance %.4f is below %.2f; try proposal_std=%.3g",
                                   rate, LOW_ACCEPTANCE, config.proposal_std / 4)
            continue
        offset = it - config.burn_in + 1
        if offset % config.thinning == 0:
            kept_ds[:, offset // config.thinning - 1] = state.ds
            kept_z[:, offset // config.thinning - 1] = state.z

    burn_rate = burn_in_accepted / (config.burn_in * config.chains) if config.burn_in else float("nan")
    samples = kept_ds.transpose(1, 0, 2).reshape(-1, N_STV)[:n_samples]
    latents = kept_z.transpose(1, 0, 2).reshape(-1, LATENT_DIM)[:n_samples]
    logger.info("sampled %d state transitions, acceptance %.3f", n_samples, state.acceptance_rate)
    return MCMCResult(samples, latents, state.acceptance_rate, burn_rate)


def state_generator(part) -> LatentMap:
    """Frozen S as a raw-units map from latents (n, 8) to state transitions (n, 7)"""
    def generate(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        with dc.no_grad():
            out = part.gen_s(z, mode="infer").data.reshape(len(z), -1)
        return part.standardizer.inverse(out)
    return generate


def state_encoder(part) -> LatentMap:
    """Frozen Z as a map from raw state transitions (n, 7) to latents (n, 8)"""
    def encode(ds: np.ndarray) -> np.ndarray:
        ds = part.standardizer.transform(ds)
        with dc.no_grad():
            return part.enc_z(ds, mode="infer").data.reshape(len(ds), -1)
    return encode
