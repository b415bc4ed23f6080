import os
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Optional, Sequence, Tuple

from dotenv import load_dotenv

from core.errors import ConfigError
from core.sampler import ChainConfig, ScenarioBox
from core.simulator import SimulationConfig
from core.training import TrainConfig

"""
Run configuration.

One JSON document describes a run. Values resolve with the precedence
command-line flags > config document > environment (``SCENGEN_*``, read
through python-dotenv) > built-in defaults. The seed has no default.
"""

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = os.path.join("data", "run.json")
DEFAULT_OUT_DIR = "runs"
DEFAULT_BUNDLE = os.path.join("runs", "bundle")
DEFAULT_LOG_LEVEL = "INFO"
ENV_OUT_DIR = "SCENGEN_OUT_DIR"
ENV_LOG_LEVEL = "SCENGEN_LOG_LEVEL"
ENV_BUNDLE = "SCENGEN_BUNDLE"


@dataclass(frozen=True)
class SynthConfig:
    oracle: str = os.path.join("data", "oracle.json")
    instruments: int = 4
    dates: int = 2600

    def validate(self) -> "SynthConfig":
        if self.instruments < 1 or self.dates < 2:
            raise ConfigError("synth needs at least 1 instrument and 2 dates")
        return self


@dataclass(frozen=True)
class AssemblyConfig:
    n_batches: int = 50
    layers_per_batch: int = 20
    n_s: int = 4
    horizon: int = 20


@dataclass(frozen=True)
class EvaluationConfig:
    bins: int = 60
    holdout: float = 0.2

    def validate(self) -> "EvaluationConfig":
        if self.bins < 1:
            raise ConfigError("evaluation bins must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("holdout must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str = DEFAULT_OUT_DIR
    bundle: str = DEFAULT_BUNDLE
    log_level: str = DEFAULT_LOG_LEVEL
    input: Optional[str] = None
    real: Optional[str] = None
    generated: Optional[str] = None
    samples: int = 1000
    depth: int = 1
    instruments: int = 0  # 0 = every reference instrument in the bundle
    boxes: Tuple[ScenarioBox, ...] = ()
    synth: SynthConfig = field(default_factory=SynthConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    train_state: TrainConfig = field(default_factory=TrainConfig)
    train_equity: TrainConfig = field(default_factory=TrainConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["boxes"] = [box.to_mapping() for box in self.boxes]
        return data

    @property
    def step_boxes(self) -> Tuple[ScenarioBox, ...]:
        """One box per simulation step"""
        if not self.boxes:
            return (ScenarioBox.unbounded(),) * self.depth
        if len(self.boxes) == 1:
            return self.boxes * self.depth
        if len(self.boxes) != self.depth:
            raise ConfigError(f"{len(self.boxes)} scenario boxes given for depth {self.depth}")
        return self.boxes


def _section(cls, data: Optional[Mapping[str, Any]], name: str, force: bool = False, **extra):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}")
    data.update({k: v for k, v in extra.items() if k in known and (force or data.get(k) is None)})
    defaults = {f.name: f.default for f in fields(cls)}
    for key, value in data.items():
        default = 0 if key == "seed" else defaults.get(key)
        data[key] = _coerce(value, default, f"{name}.{key}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad '{name}' section: {e}") from None


def parse_bound(text: str) -> Optional[float]:
    text = text.strip().lower()
    if text in ("", "null", "none"):
        return None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"bad box bound '{text}'") from None


def parse_box_flag(text: str) -> Tuple[str, Tuple[Optional[float], Optional[float]]]:
    """``"stv3=[-0.5,0.5]"`` -> ``("stv3", (-0.5, 0.5))``"""
    name, sep, interval = text.partition("=")
    interval = interval.strip()
    if not sep or not (interval.startswith("[") and interval.endswith("]")):
        raise ConfigError(f"bad --box '{text}', expected NAME=[lo,hi]")
    parts = interval[1:-1].split(",")
    if len(parts) != 2:
        raise ConfigError(f"bad --box '{text}', expected two bounds")
    return name.strip(), (parse_bound(parts[0]), parse_bound(parts[1]))


def boxes_from_flags(flags: Sequence[str]) -> Tuple[ScenarioBox, ...]:
    if not flags:
        return ()
    mapping = dict(parse_box_flag(flag) for flag in flags)
    return (ScenarioBox.from_mapping(mapping),)


def _coerce(value, default, name: str):
    """Check ``value`` against the type of the field default it replaces"""
    if value is None or default is None or isinstance(default, (tuple, list, dict)):
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        return _as_int(value, name)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def _as_int(value, name: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    try:
        number = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}") from None
    if isinstance(value, float) and number != value:
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return number


def read_document(path: Optional[str]) -> dict:
    if path is None:
        if not os.path.exists(DEFAULT_CONFIG):
            return {}
        path = DEFAULT_CONFIG
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return document


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve the run configuration from flags, document, environment and defaults.

    ``overrides`` holds flag values; ``None`` means the flag was not given.
    Recognized keys: seed, out_dir, bundle, log_level, input, real,
    generated, samples, steps, boxes, trajectories, depth.
    """
    load_dotenv()
    document = read_document(path)
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}

    seed = flags.get("seed", document.get("seed"))
    if seed is None:
        raise ConfigError("a seed is required (--seed or \"seed\" in the config document)")
    seed = _as_int(seed, "seed")
    if seed < 0:
        raise ConfigError("seed must be non-negative")

    def resolve(key: str, env: Optional[str], default):
        if key in flags:
            return flags[key]
        if document.get(key) is not None:
            return document[key]
        if env and os.getenv(env):
            return os.getenv(env)
        return default

    simulation = dict(document.get("simulation") or {})
    depth = _as_int(resolve("depth", None, simulation.pop("depth", 1)), "depth")
    instruments = _as_int(simulation.pop("instruments", document.get("instruments", 0)), "instruments")
    if "trajectories" in flags:
        simulation["trajectories"] = flags["trajectories"]

    train_state = dict(document.get("train_state") or {})
    train_equity = dict(document.get("train_equity") or {})
    if "steps" in flags:
        train_state["steps"] = train_equity["steps"] = flags["steps"]

    if "boxes" in flags and flags["boxes"]:
        boxes = tuple(flags["boxes"])
    else:
        raw = document.get("boxes") or []
        if isinstance(raw, dict):
            raw = [raw]
        boxes = tuple(ScenarioBox.from_mapping(entry) for entry in raw)

    forced = "seed" in flags
    unknown = sorted(set(document) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    config = RunConfig(
        seed=seed,
        out_dir=str(resolve("out_dir", ENV_OUT_DIR, DEFAULT_OUT_DIR)),
        bundle=str(resolve("bundle", ENV_BUNDLE, DEFAULT_BUNDLE)),
        log_level=str(resolve("log_level", ENV_LOG_LEVEL, DEFAULT_LOG_LEVEL)).upper(),
        input=resolve("input", None, None),
        real=resolve("real", None, None),
        generated=resolve("generated", None, None),
        samples=_as_int(resolve("samples", None, 1000), "samples"),
        depth=depth,
        instruments=instruments,
        boxes=boxes,
        synth=_section(SynthConfig, document.get("synth"), "synth").validate(),
        assembly=_section(AssemblyConfig, document.get("assembly"), "assembly"),
        train_state=_section(TrainConfig, train_state, "train_state", forced, seed=seed),
        train_equity=_section(TrainConfig, train_equity, "train_equity", forced, seed=seed),
        chain=_section(ChainConfig, document.get("chain"), "chain", forced, seed=seed),
        simulation=_section(SimulationConfig, simulation, "simulation", forced, seed=seed),
        evaluation=_section(EvaluationConfig, document.get("evaluation"), "evaluation").validate(),
    )
    if config.depth < 0:
        raise ConfigError("depth must be non-negative")
    if config.samples < 1:
        raise ConfigError("samples must be positive")
    if config.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"unknown log level '{config.log_level}'")
    config.step_boxes  # raises on a box/depth mismatch
    return config

