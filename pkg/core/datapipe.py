"""
Data preparation, transition engineering, dataset assembly and the
synthetic market oracle that stands in for vendor data feeds.
"""

import logging
import json
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dateutil.parser import isoparse

from core.diffcore import philox_rng
from core.errors import (
    AffineScaleError,
    AssemblyError,
    ConfigError,
    DataError,
    ForwardFillError,
    TransitionDomainError,
)

logger = logging.getLogger(__name__)

HORIZON = 20  # business days in one monthly transition
MAX_LAYER_REDRAWS = 100


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    group: str  # EQV | STV
    kind: str  # absolute | relative
    normalization: str = "none"  # none | affine
    meaning: str = ""


EQV_FEATURES = (
    FeatureSpec("EQV_1", "EQV", "relative", meaning="share price"),
    FeatureSpec("EQV_2", "EQV", "relative", meaning="market capitalization"),
    FeatureSpec("EQV_3", "EQV", "absolute", "affine", "ESG score"),
    FeatureSpec("EQV_4", "EQV", "absolute", "affine", "controversy score"),
    FeatureSpec("EQV_5", "EQV", "absolute", meaning="correlation with sector index 1"),
    FeatureSpec("EQV_6", "EQV", "absolute", meaning="correlation with sector index 2"),
    FeatureSpec("EQV_7", "EQV", "absolute", meaning="correlation with sector index 3"),
    FeatureSpec("EQV_8", "EQV", "absolute", meaning="correlation with sector index 4"),
    FeatureSpec("EQV_9", "EQV", "absolute", meaning="normalized price variation over 1 month"),
    FeatureSpec("EQV_10", "EQV", "absolute", meaning="normalized price variation over 1 year"),
    FeatureSpec("EQV_11", "EQV", "absolute", meaning="annualized volatility"),
)

STV_FEATURES = (
    FeatureSpec("STV_1", "STV", "relative", meaning="S&P 500 level"),
    FeatureSpec("STV_2", "STV", "absolute", meaning="VIX"),
    FeatureSpec("STV_3", "STV", "absolute", meaning="EUR swap spread"),
    FeatureSpec("STV_4", "STV", "relative", meaning="crude oil price"),
    FeatureSpec("STV_5", "STV", "relative", meaning="EURUSD exchange rate"),
    FeatureSpec("STV_6", "STV", "absolute", meaning="Italy insolvency proxy"),
    FeatureSpec("STV_7", "STV", "relative", meaning="gold price"),
)

FEATURE_SPECS = EQV_FEATURES + STV_FEATURES
EQV_NAMES = [f.name for f in EQV_FEATURES]
STV_NAMES = [f.name for f in STV_FEATURES]
N_EQV = len(EQV_FEATURES)
N_STV = len(STV_FEATURES)
N_COLUMNS = 2 * N_EQV + N_STV
DATASET_COLUMNS = EQV_NAMES + [f"d{n}" for n in EQV_NAMES] + [f"d{n}" for n in STV_NAMES]

EQV_SLICE = slice(0, N_EQV)
DEQV_SLICE = slice(N_EQV, 2 * N_EQV)
DSTV_SLICE = slice(2 * N_EQV, N_COLUMNS)


def kinds_of(specs: Sequence[FeatureSpec]) -> np.ndarray:
    """Boolean mask, true where the feature transitions multiplicatively"""
    return np.array([spec.kind == "relative" for spec in specs])


# ---------------------------------------------------------------------------
# Preparation
# ---------------------------------------------------------------------------

def forward_fill(values, name: str = "series") -> np.ndarray:
    """Replace every gap with the most recent prior value"""
    series = pd.Series(np.asarray(values, dtype=np.float64))
    if series.empty:
        return series.to_numpy()
    if pd.isna(series.iloc[0]):
        raise ForwardFillError(name)
    return series.ffill().to_numpy()


def affine_scale(values, lo: float, hi: float) -> np.ndarray:
    """Map ``[lo, hi]`` onto ``[0, 100]``"""
    if not hi > lo:
        raise AffineScaleError(f"affine scaling needs min < max, got min={lo} max={hi}")
    return 100.0 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)


def affine_unscale(scaled, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise AffineScaleError(f"affine scaling needs min < max, got min={lo} max={hi}")
    return lo + np.asarray(scaled, dtype=np.float64) * (hi - lo) / 100.0


def compute_transition(v_t, v_next, kind) -> np.ndarray:
    """Transition from ``v_t`` to ``v_next``.

    ``kind`` is ``"absolute"``/``"relative"`` or a boolean mask (true for
    relative) broadcasting against the values.
    """
    v_t = np.asarray(v_t, dtype=np.float64)
    v_next = np.asarray(v_next, dtype=np.float64)
    relative = np.broadcast_to(_relative_mask(kind), v_t.shape) if v_t.shape else _relative_mask(kind)
    if np.any(relative & (v_t <= 0)):
        raise TransitionDomainError("relative transition needs a strictly positive starting level")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(relative, v_next / np.where(relative, v_t, 1.0) - 1.0, v_next - v_t)


def _relative_mask(kind):
    if isinstance(kind, str):
        if kind not in ("absolute", "relative"):
            raise ConfigError(f"unknown transition kind '{kind}'")
        return np.bool_(kind == "relative")
    return np.asarray(kind, dtype=bool)


@dataclass
class Standardizer:
    """Per-column affine standardization, stored with trained models"""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray) -> "Standardizer":
        matrix = np.asarray(matrix, dtype=np.float64)
        std = matrix.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(matrix.mean(axis=0), std)

    def transform(self, matrix) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - self.mean) / self.std

    def inverse(self, matrix) -> np.ndarray:
        return np.asarray(matrix, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Standardizer":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Raw panels
# ---------------------------------------------------------------------------

@dataclass
class Panel:
    """Gap-filled levels on a common date grid.

    ``equity`` is (instruments, dates, 11) and may hold NaN before an
    instrument's first observation; ``state`` is (dates, 7).
    """
    dates: List[datetime]
    instruments: List[str]
    equity: np.ndarray
    state: np.ndarray
    scaling: Dict[str, Tuple[float, float]] = field(default_factory=dict)


def read_panel(path: str) -> pd.DataFrame:
    """Read a long-format CSV (``date,instrument,<features>``); empty cells are gaps"""
    frame = pd.read_csv(path, dtype={"instrument": str}, keep_default_na=False, na_values=[""])
    missing = [c for c in ["date", "instrument"] + EQV_NAMES + STV_NAMES if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    try:
        frame["date"] = [isoparse(str(d)) for d in frame["date"]]
    except ValueError as e:
        raise DataError(f"{path}: bad ISO-8601 date ({e})") from None
    return frame


def write_panel(frame: pd.DataFrame, path: str) -> None:
    out = frame.copy()
    out["date"] = [d.strftime("%Y-%m-%d") for d in out["date"]]
    out.to_csv(path, index=False, float_format="%.17g", na_rep="")


def prepare_panel(frame: pd.DataFrame, scaling: Optional[Dict[str, Tuple[float, float]]] = None) -> Panel:
    """Forward-fill each (instrument, feature) series and apply affine scaling.

    Cells before an instrument's first observation stay missing; the
    assembler redraws layers that touch them. Affine bounds are taken from
    the data unless ``scaling`` supplies them.
    """
    frame = frame.sort_values(["date", "instrument"])
    dates = sorted(frame["date"].unique())
    instruments = sorted(frame["instrument"].unique())

    state = (frame.groupby("date")[STV_NAMES].first().reindex(dates))
    for name in STV_NAMES:
        state[name] = forward_fill(state[name].to_numpy(), name)

    equity = np.full((len(instruments), len(dates), N_EQV), np.nan)
    wide = frame.set_index(["instrument", "date"])[EQV_NAMES]
    for k, instrument in enumerate(instruments):
        block = wide.loc[instrument].reindex(dates).ffill()
        equity[k] = block.to_numpy(dtype=np.float64)

    scaling = dict(scaling or {})
    for j, spec in enumerate(EQV_FEATURES):
        if spec.normalization != "affine":
            continue
        if spec.name not in scaling:
            column = equity[:, :, j]
            scaling[spec.name] = (float(np.nanmin(column)), float(np.nanmax(column)))
        lo, hi = scaling[spec.name]
        equity[:, :, j] = affine_scale(equity[:, :, j], lo, hi)

    state_values = state.to_numpy(dtype=np.float64)
    for j, spec in enumerate(STV_FEATURES):
        if spec.kind == "relative" and np.any(state_values[:, j] <= 0):
            raise TransitionDomainError(f"{spec.name} has non-positive levels")
    return Panel([pd.Timestamp(d).to_pydatetime() for d in dates], instruments, equity, state_values, scaling)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

@dataclass
class LayerBlock:
    date: datetime
    instruments: List[str]
    values: np.ndarray  # (n_s, 29)

    @property
    def fully_populated(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class Sample:
    levels: np.ndarray  # i, 11 EQV levels
    transitions: np.ndarray  # di
    state_transitions: np.ndarray  # ds
    date: datetime
    instrument: str


@dataclass
class AssembledDataset:
    matrix: np.ndarray  # (rows, 29), dataset column order
    row_dates: List[datetime]
    row_instruments: List[str]
    state_dates: List[datetime]
    d_s: np.ndarray  # one state transition per distinct date
    layers: List[LayerBlock]

    @property
    def d_e(self) -> np.ndarray:
        return self.matrix

    def samples(self) -> Iterator[Sample]:
        for row, date, name in zip(self.matrix, self.row_dates, self.row_instruments):
            yield Sample(row[EQV_SLICE], row[DEQV_SLICE], row[DSTV_SLICE], date, name)


def _layer_values(panel: Panel, date_index: int, members: np.ndarray, horizon: int,
                  eqv_relative: np.ndarray, stv_relative: np.ndarray) -> Optional[np.ndarray]:
    levels = panel.equity[members, date_index]
    ahead = panel.equity[members, date_index + horizon]
    if not (np.all(np.isfinite(levels)) and np.all(np.isfinite(ahead))):
        return None
    if np.any(levels[:, eqv_relative] <= 0):
        return None
    d_eqv = compute_transition(levels, ahead, eqv_relative)
    d_stv = compute_transition(panel.state[date_index], panel.state[date_index + horizon], stv_relative)
    values = np.concatenate([levels, d_eqv, np.broadcast_to(d_stv, (len(members), N_STV))], axis=1)
    return values if np.all(np.isfinite(values)) else None


def assemble_dataset(panel: Panel, n_batches: int, layers_per_batch: int, n_s: int, seed: int,
                     horizon: int = HORIZON) -> AssembledDataset:
    """Stack ``n_batches * layers_per_batch`` layers of ``n_s`` instruments.

    Each layer uses its own generator derived from (seed, layer index), so the
    result does not depend on evaluation order.
    """
    if n_batches < 1 or layers_per_batch < 1:
        raise ConfigError("n_batches and layers_per_batch must be positive")
    if not 1 <= n_s <= len(panel.instruments):
        raise ConfigError(f"n_s must lie in [1, {len(panel.instruments)}], got {n_s}")
    valid_dates = len(panel.dates) - horizon
    if valid_dates < 1:
        raise AssemblyError(f"need more than {horizon} dates, panel has {len(panel.dates)}")

    eqv_relative = kinds_of(EQV_FEATURES)
    stv_relative = kinds_of(STV_FEATURES)
    n_layers = n_batches * layers_per_batch
    matrix = np.empty((n_layers * n_s, N_COLUMNS))
    row_dates: List[datetime] = []
    row_instruments: List[str] = []
    layers: List[LayerBlock] = []
    date_of_layer = np.empty(n_layers, dtype=np.int64)

    for index in range(n_layers):
        rng = philox_rng(seed, index)
        for attempt in range(MAX_LAYER_REDRAWS):
            date_index = int(rng.integers(valid_dates))
            members = np.sort(rng.choice(len(panel.instruments), size=n_s, replace=False))
            values = _layer_values(panel, date_index, members, horizon, eqv_relative, stv_relative)
            if values is not None:
                break
            logger.debug("layer %d: date %s not fully populated, redrawing", index, panel.dates[date_index])
        else:
            raise AssemblyError(f"layer {index}: no fully populated draw in {MAX_LAYER_REDRAWS} attempts")
        matrix[index * n_s:(index + 1) * n_s] = values
        names = [panel.instruments[m] for m in members]
        date = panel.dates[date_index]
        row_dates.extend([date] * n_s)
        row_instruments.extend(names)
        layers.append(LayerBlock(date, names, matrix[index * n_s:(index + 1) * n_s]))
        date_of_layer[index] = date_index

    unique_dates = np.unique(date_of_layer)
    d_s = np.stack([
        compute_transition(panel.state[d], panel.state[d + horizon], stv_relative) for d in unique_dates
    ])
    logger.info("assembled %d rows from %d layers (%d distinct dates)", matrix.shape[0], n_layers, len(unique_dates))
    return AssembledDataset(matrix, row_dates, row_instruments,
                            [panel.dates[d] for d in unique_dates], d_s, layers)


def write_dataset(matrix: np.ndarray, path: str, columns: Optional[Sequence[str]] = None) -> None:
    columns = list(columns or DATASET_COLUMNS)
    if matrix.ndim != 2 or matrix.shape[1] != len(columns):
        raise DataError(f"dataset has shape {matrix.shape}, expected {len(columns)} columns")
    pd.DataFrame(matrix, columns=columns).to_csv(path, index=False, float_format="%.17g")


def read_dataset(path: str, columns: Optional[Sequence[str]] = None) -> np.ndarray:
    columns = list(columns or DATASET_COLUMNS)
    frame = pd.read_csv(path)
    if list(frame.columns) != columns:
        raise DataError(f"{path}: header {list(frame.columns)} does not match {columns}")
    matrix = frame.to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"{path}: non-finite entries")
    return matrix


# ---------------------------------------------------------------------------
# Synthetic market oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleModel:
    """Known joint law of state and instrument dynamics.

    State transitions over one horizon are N(0, covariance) in log space for
    relative features and in level space for absolute ones; the covariance is
    ``D (L L^T + diag(1 - diag(L L^T))) D`` from volatilities ``D`` and factor
    loadings ``L``. Instrument increments respond to state increments through
    ``response`` and revert toward each instrument's starting level.
    """
    state_vols: np.ndarray
    state_loadings: np.ndarray
    state_initial: np.ndarray
    response: np.ndarray
    mean_reversion: np.ndarray
    noise: np.ndarray
    equity_initial: np.ndarray
    equity_dispersion: np.ndarray
    sparse_every: int = 20
    start_date: str = "2011-09-30"
    horizon: int = HORIZON

    def __post_init__(self):
        for name in ("state_vols", "state_loadings", "state_initial", "response", "mean_reversion",
                     "noise", "equity_initial", "equity_dispersion"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.validate()

    def validate(self):
        shapes = {
            "state_vols": (N_STV,), "state_initial": (N_STV,), "response": (N_EQV, N_STV),
            "mean_reversion": (N_EQV,), "noise": (N_EQV,), "equity_initial": (N_EQV,),
            "equity_dispersion": (N_EQV,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"oracle {name} must have shape {shape}, got {getattr(self, name).shape}")
        if self.state_loadings.ndim != 2 or self.state_loadings.shape[0] != N_STV:
            raise ConfigError("oracle state_loadings must have 7 rows")
        if np.any(self.state_vols <= 0) or np.any(self.noise < 0):
            raise ConfigError("oracle volatilities must be positive and noise scales non-negative")
        if np.any(np.sum(self.state_loadings ** 2, axis=1) >= 1.0):
            raise ConfigError("oracle loadings must have row norms below 1")
        relative = kinds_of(EQV_FEATURES)
        if np.any(self.equity_initial[relative] <= 0) or np.any(self.state_initial[kinds_of(STV_FEATURES)] <= 0):
            raise ConfigError("relative-kind initial levels must be positive")
        if self.horizon < 1 or self.sparse_every < 1:
            raise ConfigError("horizon and sparse_every must be positive")

    @property
    def correlation(self) -> np.ndarray:
        common = self.state_loadings @ self.state_loadings.T
        return common + np.diag(1.0 - np.diag(common))

    @property
    def covariance(self) -> np.ndarray:
        d = np.diag(self.state_vols)
        return d @ self.correlation @ d

    def sample_state_transitions(self, n: int, rng: np.random.Generator, fraction: float = 1.0) -> np.ndarray:
        """Draw ``n`` state increments from N(0, fraction * covariance) in working units"""
        chol = np.linalg.cholesky(self.covariance * fraction)
        return rng.standard_normal((n, N_STV)) @ chol.T

    def instrument_increment(self, log_levels: np.ndarray, anchor: np.ndarray, state_increment: np.ndarray,
                             shocks: np.ndarray) -> np.ndarray:
        """One-row increments for instruments in working (log for relative) units"""
        drift = self.mean_reversion * (anchor - log_levels) / self.horizon
        return state_increment @ self.response.T + drift + shocks * self.noise / np.sqrt(self.horizon)

    @classmethod
    def from_dict(cls, data: dict) -> "OracleModel":
        state, equity = data.get("state", {}), data.get("equity", {})
        try:
            return cls(
                state_vols=state["vols"],
                state_loadings=state["loadings"],
                state_initial=state["initial"],
                response=equity["response"],
                mean_reversion=equity["mean_reversion"],
                noise=equity["noise"],
                equity_initial=equity["initial"],
                equity_dispersion=equity["dispersion"],
                sparse_every=int(data.get("sparse_every", 20)),
                start_date=str(data.get("start_date", "2011-09-30")),
                horizon=int(data.get("horizon", HORIZON)),
            )
        except KeyError as e:
            raise ConfigError(f"oracle document is missing {e}") from None

    def to_dict(self) -> dict:
        return {
            "state": {"vols": self.state_vols.tolist(), "loadings": self.state_loadings.tolist(),
                      "initial": self.state_initial.tolist()},
            "equity": {"response": self.response.tolist(), "mean_reversion": self.mean_reversion.tolist(),
                       "noise": self.noise.tolist(), "initial": self.equity_initial.tolist(),
                       "dispersion": self.equity_dispersion.tolist()},
            "sparse_every": self.sparse_every,
            "start_date": self.start_date,
            "horizon": self.horizon,
        }


def load_oracle(path: str) -> OracleModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return OracleModel.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read oracle document {path}: {e}") from None


@dataclass
class SynthResult:
    frame: pd.DataFrame
    state_levels: np.ndarray  # (dates, 7)
    equity_levels: np.ndarray  # (instruments, dates, 11), fully observed
    state_increments: np.ndarray  # (dates - 1, 7), working units


def synth_generate(oracle: OracleModel, n_instruments: int, n_dates: int, seed: int) -> SynthResult:
    """Simulate a daily panel from the oracle.

    Each row draws state increments from N(0, covariance / horizon), so a
    horizon of rows accumulates the oracle covariance. Relative features move
    in log space, which keeps them positive. Score-like features are reported
    only every ``sparse_every`` rows.
    """
    if n_instruments < 1 or n_dates < 2:
        raise ConfigError("synth needs at least one instrument and two dates")
    rng = philox_rng(seed)
    stv_rel = kinds_of(STV_FEATURES)
    eqv_rel = kinds_of(EQV_FEATURES)

    increments = oracle.sample_state_transitions(n_dates - 1, rng, 1.0 / oracle.horizon)
    start = np.where(stv_rel, np.log(np.where(stv_rel, oracle.state_initial, 1.0)), oracle.state_initial)
    working_state = np.vstack([start, start + np.cumsum(increments, axis=0)])
    state_levels = np.where(stv_rel, np.exp(working_state), working_state)

    base = np.where(eqv_rel, np.log(np.where(eqv_rel, oracle.equity_initial, 1.0)), oracle.equity_initial)
    anchors = base + rng.standard_normal((n_instruments, N_EQV)) * oracle.equity_dispersion
    working = np.empty((n_instruments, n_dates, N_EQV))
    working[:, 0] = anchors
    for t in range(1, n_dates):
        shocks = rng.standard_normal((n_instruments, N_EQV))
        working[:, t] = working[:, t - 1] + oracle.instrument_increment(
            working[:, t - 1], anchors, increments[t - 1], shocks)
    equity_levels = np.where(eqv_rel, np.exp(working), working)

    dates = pd.bdate_range(isoparse(oracle.start_date), periods=n_dates)
    records = []
    sparse = [j for j, spec in enumerate(EQV_FEATURES) if spec.normalization == "affine"]
    for k in range(n_instruments):
        block = pd.DataFrame(equity_levels[k], columns=EQV_NAMES)
        observed = np.arange(n_dates) % oracle.sparse_every == 0
        for j in sparse:
            block.loc[~observed, EQV_NAMES[j]] = np.nan
        block.insert(0, "instrument", f"INST{k + 1:03d}")
        block.insert(0, "date", [d.to_pydatetime() for d in dates])
        for j, name in enumerate(STV_NAMES):
            block[name] = state_levels[:, j]
        records.append(block)
    frame = pd.concat(records, ignore_index=True).sort_values(["date", "instrument"], ignore_index=True)
    logger.info("synthesized %d instruments over %d business days", n_instruments, n_dates)
    return SynthResult(frame, state_levels, equity_levels, increments)
