"""
Recursive trajectory generation and portfolio simulation.

``single_trajectory`` follows the one-instrument recursion: sample a
box-conditioned state transition, draw a latent, generate the instrument
transition and apply it with the star operator. ``portfolio_simulate``
samples each distinct box once, then at every step pairs fresh latents with
those state draws through a Cartesian product consumed without replacement.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from core import diffcore as dc
from core.datapipe import EQV_FEATURES, EQV_NAMES, N_EQV, N_STV, kinds_of
from core.errors import ConfigError, EvaluationError, PositivityError, ShapeMismatchError
from core.sampler import (
    LATENT_DIM,
    ChainConfig,
    ScenarioBox,
    mh_sample_conditioned,
    state_encoder,
    state_generator,
    window_indicator,
)

logger = logging.getLogger(__name__)

PAIR_SHARING = ("shared", "per_instrument")
EQV_RELATIVE = kinds_of(EQV_FEATURES)


class ScenarioModels(Protocol):
    def generate_state(self, z: np.ndarray) -> np.ndarray: ...

    def encode_state(self, ds: np.ndarray) -> np.ndarray: ...

    def generate_instrument(self, z: np.ndarray, levels: np.ndarray, ds: np.ndarray) -> np.ndarray: ...


class BundleModels:
    """Trained networks of a model bundle, working in raw feature units"""

    def __init__(self, bundle):
        self.state = bundle.require("state")
        self.equity = bundle.require("equity")
        self._generate = state_generator(self.state)
        self._encode = state_encoder(self.state)
        self._affine = [
            (j, self.equity.scaling[spec.name]) for j, spec in enumerate(EQV_FEATURES)
            if spec.normalization == "affine" and spec.name in self.equity.scaling
        ]

    def generate_state(self, z: np.ndarray) -> np.ndarray:
        return self._generate(z)

    def encode_state(self, ds: np.ndarray) -> np.ndarray:
        return self._encode(ds)

    def generate_instrument(self, z: np.ndarray, levels: np.ndarray, ds: np.ndarray) -> np.ndarray:
        levels = np.array(levels, dtype=np.float64)
        for j, (lo, hi) in self._affine:
            levels[:, j] = 100.0 * (levels[:, j] - lo) / (hi - lo)
        condition = self.equity.condition.transform(np.hstack([levels, ds]))
        with dc.no_grad():
            out = self.equity.gen_e([np.asarray(z, dtype=np.float64), condition], mode="infer").data
        generated = self.equity.target.inverse(out.reshape(len(z), -1))
        transitions = np.zeros((len(z), N_EQV))
        transitions[:, :generated.shape[1]] = generated
        for j, (lo, hi) in self._affine:
            transitions[:, j] *= (hi - lo) / 100.0
        return transitions


def star_step(levels, transitions, relative=EQV_RELATIVE):
    """Star operator without raising: next levels and the entries that break positivity.

    Relative-kind entries that are not strictly positive afterwards (NaN
    included) are flagged.
    """
    levels = np.asarray(levels, dtype=np.float64)
    transitions = np.asarray(transitions, dtype=np.float64)
    relative = np.asarray(relative, dtype=bool)
    if levels.shape != transitions.shape or levels.shape[-1] != relative.size:
        raise ShapeMismatchError("apply_star", (levels.shape, transitions.shape))
    result = np.where(relative, levels * (1.0 + transitions), levels + transitions)
    return result, relative & ~(result > 0)


def apply_star(levels, transitions, relative=EQV_RELATIVE, step: Optional[int] = None) -> np.ndarray:
    """Apply transitions to levels: ``i * (1 + d)`` for relative kinds, ``i + d`` otherwise"""
    levels = np.asarray(levels, dtype=np.float64)
    relative = np.asarray(relative, dtype=bool)
    result, bad = star_step(levels, transitions, relative)
    bad_start = relative & (levels <= 0)
    if np.any(bad_start):
        feature = int(np.argwhere(bad_start)[0][-1])
        raise PositivityError(f"feature {feature + 1} starts at a non-positive level", feature, step)
    if np.any(bad):
        feature = int(np.argwhere(bad)[0][-1])
        raise PositivityError(
            f"transition drives feature {feature + 1} to a non-positive level", feature, step)
    return result


@dataclass(frozen=True)
class InstrumentState:
    levels: np.ndarray  # 11 EQV values, relative kinds strictly positive
    instrument: str
    t: int


@dataclass
class Trajectory:
    levels: np.ndarray  # (p + 1, 11)
    transitions: np.ndarray  # (p, 11)
    state_transitions: np.ndarray  # (p, 7)
    latents: np.ndarray  # (p, 8)
    instrument: str = ""

    @property
    def depth(self) -> int:
        return len(self.transitions)

    def replay(self) -> np.ndarray:
        levels = [self.levels[0]]
        for t in range(self.depth):
            levels.append(apply_star(levels[-1], self.transitions[t], step=t))
        return np.stack(levels)

    def states(self) -> List[InstrumentState]:
        return [InstrumentState(row, self.instrument, t) for t, row in enumerate(self.levels)]


def single_trajectory(initial, boxes: Sequence[ScenarioBox], models: ScenarioModels, chain: ChainConfig,
                      seed: int, pool: Optional[np.ndarray] = None, instrument: str = "") -> Trajectory:
    """One instrument path of depth ``len(boxes)``"""
    levels = [np.asarray(initial, dtype=np.float64)]
    if levels[0].shape != (N_EQV,):
        raise ShapeMismatchError("single_trajectory", levels[0].shape)
    rng = dc.philox_rng(seed, 1)
    transitions, states, latents = [], [], []
    for t, box in enumerate(boxes):
        step_chain = replace(chain, seed=dc.derive_seed(seed, 2, t))
        ds = mh_sample_conditioned(models.generate_state, box, 1, step_chain,
                                   models.encode_state, pool).samples[0]
        z = rng.standard_normal(LATENT_DIM)
        di = models.generate_instrument(z[None, :], levels[-1][None, :], ds[None, :])[0]
        levels.append(apply_star(levels[-1], di, step=t))
        transitions.append(di)
        states.append(ds)
        latents.append(z)
    p = len(boxes)
    return Trajectory(
        np.stack(levels),
        np.array(transitions).reshape(p, N_EQV),
        np.array(states).reshape(p, N_STV),
        np.array(latents).reshape(p, LATENT_DIM),
        instrument,
    )


@dataclass(frozen=True)
class SimulationConfig:
    trajectories: int = 1000
    state_draws: int = 100
    pair_sharing: str = "shared"
    bins: int = 30
    seed: Optional[int] = None

    @property
    def latent_draws(self) -> int:
        return self.trajectories // self.state_draws

    def validate(self) -> "SimulationConfig":
        if self.seed is None:
            raise ConfigError("a seed is required for simulation")
        if self.trajectories < 1 or self.state_draws < 1:
            raise ConfigError("trajectories and state_draws must be positive")
        if self.trajectories % self.state_draws:
            raise ConfigError(
                f"trajectories ({self.trajectories}) must be a multiple of state_draws ({self.state_draws})")
        if self.pair_sharing not in PAIR_SHARING:
            raise ConfigError(f"pair_sharing must be one of {PAIR_SHARING}")
        if self.bins < 1:
            raise ConfigError("bins must be positive")
        return self


@dataclass
class PortfolioRun:
    instruments: List[str]
    levels: np.ndarray  # (K, n_t, p + 1, 11); NaN after an aborted step
    transitions: np.ndarray  # (K, n_t, p, 11)
    state_transitions: np.ndarray  # (K, n_t, p, 7)
    pairs: np.ndarray  # (K, p, n_t, 2): (latent index, state-draw index)
    latents: np.ndarray  # (p, I_t, 8)
    box_draws: List[np.ndarray]  # one (S_t, 7) set per distinct box
    box_of_step: np.ndarray  # (p,)
    boxes: List[ScenarioBox]
    mcmc_passes: int
    aborted: List[dict] = field(default_factory=list)

    @property
    def n_trajectories(self) -> int:
        return self.levels.shape[1]

    @property
    def depth(self) -> int:
        return self.transitions.shape[2]


def portfolio_simulate(initial_states, boxes: Sequence[ScenarioBox], latent_draws: int, state_draws: int,
                       models: ScenarioModels, chain: ChainConfig, seed: int, pair_sharing: str = "shared",
                       pool: Optional[np.ndarray] = None, instruments: Optional[Sequence[str]] = None) -> PortfolioRun:
    """Simulate ``latent_draws * state_draws`` trajectories for every instrument.

    With ``pair_sharing="shared"`` trajectory m uses the same (z, ds) pair
    for every instrument at a step; ``"per_instrument"`` draws an independent
    permutation of the pairs per instrument.
    """
    initial = np.atleast_2d(np.asarray(initial_states, dtype=np.float64))
    if initial.shape[1] != N_EQV:
        raise ShapeMismatchError("portfolio_simulate", initial.shape)
    if latent_draws < 1 or state_draws < 1:
        raise ConfigError("latent and state draw counts must be positive")
    if pair_sharing not in PAIR_SHARING:
        raise ConfigError(f"pair_sharing must be one of {PAIR_SHARING}")
    n_instruments = initial.shape[0]
    n_t = latent_draws * state_draws
    p = len(boxes)
    names = list(instruments) if instruments is not None else [f"INST{k + 1:03d}" for k in range(n_instruments)]

    distinct: Dict[ScenarioBox, int] = {}
    box_draws: List[np.ndarray] = []
    box_of_step = np.empty(p, dtype=np.int64)
    for t, box in enumerate(boxes):
        if box not in distinct:
            sub = replace(chain, seed=dc.derive_seed(seed, 3, len(distinct)))
            result = mh_sample_conditioned(models.generate_state, box, state_draws, sub,
                                           models.encode_state, pool)
            distinct[box] = len(box_draws)
            box_draws.append(result.samples)
        box_of_step[t] = distinct[box]
    logger.info("%d distinct scenario boxes over %d steps", len(distinct), p)

    rng = dc.philox_rng(seed, 4)
    levels = np.full((n_instruments, n_t, p + 1, N_EQV), np.nan)
    levels[:, :, 0] = initial[:, None, :]
    transitions = np.full((n_instruments, n_t, p, N_EQV), np.nan)
    states = np.full((n_instruments, n_t, p, N_STV), np.nan)
    pairs = np.empty((n_instruments, p, n_t, 2), dtype=np.int64)
    latents = np.empty((p, latent_draws, LATENT_DIM))
    alive = np.ones((n_instruments, n_t), dtype=bool)
    aborted: List[dict] = []

    for t in range(p):
        draws = box_draws[box_of_step[t]]
        latents[t] = rng.standard_normal((latent_draws, LATENT_DIM))
        if pair_sharing == "shared":
            order = np.broadcast_to(rng.permutation(n_t), (n_instruments, n_t))
        else:
            order = np.stack([rng.permutation(n_t) for _ in range(n_instruments)])
        pairs[:, t, :, 0] = order // state_draws
        pairs[:, t, :, 1] = order % state_draws

        for k in range(n_instruments):
            rows = np.flatnonzero(alive[k])
            if rows.size == 0:
                continue
            z = latents[t][pairs[k, t, rows, 0]]
            ds = draws[pairs[k, t, rows, 1]]
            current = levels[k, rows, t]
            di = models.generate_instrument(z, current, ds)
            nxt, violations = star_step(current, di)
            failed = np.any(violations, axis=1) | ~np.all(np.isfinite(nxt), axis=1)
            for i in np.flatnonzero(failed):
                row = int(rows[i])
                hits = np.flatnonzero(violations[i])
                feature = int(hits[0]) if hits.size else -1
                aborted.append({"instrument": names[k], "trajectory": row, "step": t, "feature": feature})
                logger.warning("trajectory %d of %s aborted at step %d: non-positive level",
                               row, names[k], t)
            ok = rows[~failed]
            levels[k, ok, t + 1] = nxt[~failed]
            transitions[k, ok, t] = di[~failed]
            states[k, ok, t] = ds[~failed]
            alive[k, rows[failed]] = False

    return PortfolioRun(names, levels, transitions, states, pairs, latents, box_draws, box_of_step,
                        list(boxes), len(distinct), aborted)


# ---------------------------------------------------------------------------
# Binned marginal estimates
# ---------------------------------------------------------------------------

@dataclass
class BinnedEstimate:
    feature: int
    t: int
    edges: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n: int

    def to_frame(self, feature_name: Optional[str] = None) -> pd.DataFrame:
        return pd.DataFrame({
            "feature": feature_name or EQV_NAMES[self.feature],
            "t": self.t,
            "bin_lo": self.edges[:-1],
            "bin_hi": self.edges[1:],
            "mean": self.mean,
            "stderr": self.stderr,
        })


def default_bin_edges(values, bins: int = 30, lower_pct: float = 0.5, upper_pct: float = 99.5) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise EvaluationError("no finite values to bin")
    lo, hi = np.percentile(values, [lower_pct, upper_pct])
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def bin_fractions(values, edges, n: Optional[int] = None):
    """Fraction of ``n`` values per bin; bins are [lo, hi) except the last, which is closed"""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise EvaluationError("need at least one bin (two edges)")
    if np.any(np.diff(edges) <= 0):
        raise EvaluationError("bin edges must be strictly increasing")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    n = values.size if n is None else n
    if n < 1:
        raise EvaluationError("no values to estimate from")
    finite = values[np.isfinite(values)]
    index = np.searchsorted(edges, finite, side="right") - 1
    index[finite == edges[-1]] = edges.size - 2
    inside = (index >= 0) & (index < edges.size - 1)
    counts = np.bincount(index[inside], minlength=edges.size - 1)
    mean = counts / n
    return mean, np.sqrt(mean * (1.0 - mean) / n)


def binned_estimate(run: PortfolioRun, feature: int, t: int, edges, instrument: int = 0,
                    quantity: str = "transition") -> BinnedEstimate:
    """Trajectory-averaged bin indicators of one feature at one step.

    ``quantity`` selects the instrument transitions used at step ``t``
    (``0 <= t < p``) or the levels reached at time ``t`` (``0 <= t <= p``).
    Aborted trajectories count in the denominator and in no bin.
    """
    if quantity == "transition":
        values = run.transitions[instrument, :, t, feature]
    elif quantity == "level":
        values = run.levels[instrument, :, t, feature]
    else:
        raise ConfigError(f"quantity must be 'transition' or 'level', got '{quantity}'")
    mean, stderr = bin_fractions(values, edges, run.n_trajectories)
    return BinnedEstimate(feature, t, np.asarray(edges, dtype=np.float64), mean, stderr, run.n_trajectories)


def trajectory_frame(run: PortfolioRun, instrument: int) -> pd.DataFrame:
    """Rows ``t,m,<EQV levels>`` for one instrument"""
    n_t, steps = run.n_trajectories, run.depth + 1
    t_index, m_index = np.meshgrid(np.arange(steps), np.arange(n_t), indexing="ij")
    values = run.levels[instrument].transpose(1, 0, 2).reshape(steps * n_t, N_EQV)
    frame = pd.DataFrame(values, columns=EQV_NAMES)
    frame.insert(0, "m", m_index.reshape(-1))
    frame.insert(0, "t", t_index.reshape(-1))
    return frame


def binned_frame(run: PortfolioRun, instrument: int, bins: int = 30) -> pd.DataFrame:
    """Binned transition estimates for every feature and step of one instrument"""
    frames = []
    for t in range(run.depth):
        for c in range(N_EQV):
            values = run.transitions[instrument, :, t, c]
            if not np.any(np.isfinite(values)):
                continue
            edges = default_bin_edges(values, bins)
            frames.append(binned_estimate(run, c, t, edges, instrument).to_frame())
    if not frames:
        return pd.DataFrame(columns=["feature", "t", "bin_lo", "bin_hi", "mean", "stderr"])
    return pd.concat(frames, ignore_index=True)


def check_boxes(run: PortfolioRun) -> bool:
    """True when every stored state transition lies in its step's box"""
    for t, box in enumerate(run.boxes):
        ds = run.state_transitions[:, :, t].reshape(-1, N_STV)
        ds = ds[np.all(np.isfinite(ds), axis=1)]
        if ds.size and not np.all(window_indicator(ds, box)):
            return False
    return True
