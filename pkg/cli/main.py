import os
import sys
import json
import logging
import argparse
import platform
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from core import diffcore as dc
from core.config import RunConfig, boxes_from_flags, load_run_config
from core.datapipe import (
    DATASET_COLUMNS,
    DSTV_SLICE,
    EQV_FEATURES,
    EQV_NAMES,
    EQV_SLICE,
    affine_unscale,
    assemble_dataset,
    load_oracle,
    prepare_panel,
    read_dataset,
    read_panel,
    synth_generate,
    write_dataset,
    write_panel,
)
from core.errors import DataError, GradCheckFailed, ScenGenError
from core.evalkit import score_report, triangle_export
from core.model_store import canonical_json, get_bundle_store
from core.netlib import STANDARD_SPECS, build_standard
from core.sampler import ScenarioBox, mh_sample_conditioned, state_encoder, state_generator
from core.simulator import BundleModels, binned_frame, portfolio_simulate, trajectory_frame
from core.training import train_bigan, train_cgan

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=logging.INFO,
)
logger = logging.getLogger(__name__)

DS_COLUMNS = DATASET_COLUMNS[DSTV_SLICE]
PANEL_FILE = "panel.csv"
DS_FILE = "d_s.csv"
DS_HOLDOUT_FILE = "d_s_holdout.csv"
DE_FILE = "d_e.csv"
SCALING_FILE = "scaling.json"
INITIAL_FILE = "initial_states.csv"
RUN_MANIFEST = "manifest.json"


class UsageError(ScenGenError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class ScenarioLab:
    """Command dispatcher: one handler per pipeline stage"""

    def __init__(self):
        self.handlers: Dict[str, Callable[[RunConfig, argparse.Namespace], List[str]]] = {}
        self._extra: dict = {}
        self.parser = _Parser(prog="scengen", description="GAN-based economic scenario generator")
        self.subparsers = self.parser.add_subparsers(dest="command", metavar="COMMAND")
        self.setup_handlers()

    # ============== Handler setup ==============
    def setup_handlers(self):
        # Data
        self.add_handler("synth", self.synth, "generate an oracle market panel")
        self.add_handler("prepare", self.prepare, "assemble the state and equity datasets")

        # Training
        self.add_handler("train-state", self.train_state, "train the state BiGAN")
        self.add_handler("train-equity", self.train_equity, "train the conditional instrument GAN")

        # Scenarios
        self.add_handler("sample", self.sample, "sample box-conditioned state transitions")
        self.add_handler("simulate", self.simulate, "simulate portfolio trajectories")

        # Diagnostics
        self.add_handler("evaluate", self.evaluate, "score generated against real samples")
        self.add_handler("grad-check", self.grad_check, "finite-difference gradient report")

    def add_handler(self, name: str, handler, help_text: str):
        sub = self.subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="run configuration JSON (default data/run.json)")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--out", dest="out_dir")
        sub.add_argument("--bundle")
        sub.add_argument("--input", help="input file of the command")
        sub.add_argument("--real")
        sub.add_argument("--generated")
        sub.add_argument("--samples", type=int)
        sub.add_argument("--steps", type=int)
        sub.add_argument("--box", action="append", default=[], help='e.g. "stv3=[-0.5,0.5]", repeatable')
        sub.add_argument("--trajectories", type=int)
        sub.add_argument("--depth", type=int)
        sub.add_argument("--entries", type=int, help="grad-check: entries drawn per tensor (default all)")
        sub.add_argument("--log-level", dest="log_level")
        self.handlers[name] = handler

    # ============== Runner ==============
    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
            if args.command is None:
                raise UsageError(f"a command is required: {', '.join(self.handlers)}")
            config = load_run_config(args.config, {
                "seed": args.seed, "out_dir": args.out_dir, "bundle": args.bundle, "input": args.input,
                "real": args.real, "generated": args.generated, "samples": args.samples,
                "steps": args.steps, "boxes": boxes_from_flags(args.box), "trajectories": args.trajectories,
                "depth": args.depth, "log_level": args.log_level,
            })
            logging.getLogger().setLevel(config.log_level)
            os.makedirs(config.out_dir, exist_ok=True)
            artifacts = self.handlers[args.command](config, args)
            self._write_manifest(args.command, config, artifacts, self._extra)
        except ScenGenError as e:
            logger.error("%s: %s", type(e).__name__, e)
            return e.exit_code
        finally:
            self._extra = {}
        return 0

    def _write_manifest(self, command: str, config: RunConfig, artifacts: List[str], extra: dict):
        manifest = {
            "command": command,
            "seed": config.seed,
            "config": config.to_dict(),
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "pandas": pd.__version__,
            },
            "artifacts": sorted(os.path.relpath(a, config.out_dir) for a in artifacts),
        }
        manifest.update(extra)
        path = os.path.join(config.out_dir, RUN_MANIFEST)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(canonical_json(manifest))
        logger.info("wrote %s", path)

    @staticmethod
    def _path(config: RunConfig, name: str) -> str:
        return os.path.join(config.out_dir, name)

    @staticmethod
    def _require_file(path: Optional[str], what: str) -> str:
        if not path or not os.path.exists(path):
            raise DataError(f"{what} not found: {path}")
        return path

    # ============== Data ==============
    def synth(self, config: RunConfig, args) -> List[str]:
        oracle = load_oracle(config.synth.oracle)
        result = synth_generate(oracle, config.synth.instruments, config.synth.dates, config.seed)
        path = self._path(config, PANEL_FILE)
        write_panel(result.frame, path)
        logger.info("wrote %s (%d rows)", path, len(result.frame))
        return [path]

    def prepare(self, config: RunConfig, args) -> List[str]:
        source = self._require_file(config.input or self._path(config, PANEL_FILE), "panel")
        panel = prepare_panel(read_panel(source))
        a = config.assembly
        dataset = assemble_dataset(panel, a.n_batches, a.layers_per_batch, a.n_s, config.seed, a.horizon)

        order = dc.philox_rng(config.seed, 60000).permutation(len(dataset.d_s))
        n_holdout = int(round(config.evaluation.holdout * len(order)))
        if len(order) - n_holdout < 2:
            raise DataError(f"only {len(order)} distinct state transitions; lower the holdout or add dates")
        paths = {name: self._path(config, name) for name in (DS_FILE, DS_HOLDOUT_FILE, DE_FILE, SCALING_FILE, INITIAL_FILE)}
        write_dataset(dataset.d_s[np.sort(order[n_holdout:])], paths[DS_FILE], DS_COLUMNS)
        write_dataset(dataset.d_s[np.sort(order[:n_holdout])], paths[DS_HOLDOUT_FILE], DS_COLUMNS)
        write_dataset(dataset.d_e, paths[DE_FILE])
        with open(paths[SCALING_FILE], "w", encoding="utf-8", newline="\n") as f:
            f.write(canonical_json({name: list(bounds) for name, bounds in panel.scaling.items()}))

        latest = _raw_levels(panel.equity[:, -1], panel.scaling)
        keep = np.all(np.isfinite(latest), axis=1)
        initial = pd.DataFrame(latest[keep], columns=EQV_NAMES)
        initial.insert(0, "instrument", [name for name, ok in zip(panel.instruments, keep) if ok])
        initial.to_csv(paths[INITIAL_FILE], index=False, float_format="%.17g")
        return list(paths.values())

    # ============== Training ==============
    def train_state(self, config: RunConfig, args) -> List[str]:
        d_s = read_dataset(self._require_file(config.input or self._path(config, DS_FILE), "state dataset"), DS_COLUMNS)
        store = get_bundle_store(config.bundle)
        part, state = train_bigan(d_s, config.train_state,
                                  checkpoint=lambda trainer: store.save_part("state", trainer.part()))
        store.save_part("state", part)
        history = self._path(config, "history_state.csv")
        state.history_frame().to_csv(history, index=False, float_format="%.17g")
        self._extra = {"steps": state.step, "skipped_steps": state.skipped, "spectral_audit": state.spectral_audit}
        return [history]

    def train_equity(self, config: RunConfig, args) -> List[str]:
        source = self._require_file(config.input or self._path(config, DE_FILE), "equity dataset")
        d_e = read_dataset(source)
        folder = os.path.dirname(source)
        scaling = {}
        scaling_path = os.path.join(folder, SCALING_FILE)
        if os.path.exists(scaling_path):
            with open(scaling_path, "r", encoding="utf-8") as f:
                scaling = {name: tuple(bounds) for name, bounds in json.load(f).items()}
        initial_path = os.path.join(folder, INITIAL_FILE)
        if os.path.exists(initial_path):
            reference = pd.read_csv(initial_path)[EQV_NAMES].to_numpy(dtype=np.float64)
        else:
            reference = _raw_levels(d_e[:1, EQV_SLICE], scaling)
        store = get_bundle_store(config.bundle)
        part, state = train_cgan(d_e, config.train_equity,
                                 checkpoint=lambda trainer: store.save_part("equity", trainer.part()),
                                 scaling=scaling, reference_levels=reference)
        store.save_part("equity", part)
        history = self._path(config, "history_equity.csv")
        state.history_frame().to_csv(history, index=False, float_format="%.17g")
        self._extra = {"steps": state.step, "skipped_steps": state.skipped, "spectral_audit": state.spectral_audit}
        return [history]

    # ============== Scenarios ==============
    def sample(self, config: RunConfig, args) -> List[str]:
        part = get_bundle_store(config.bundle).load().require("state")
        box = config.boxes[0] if config.boxes else ScenarioBox.unbounded()
        pool = read_dataset(config.input, DS_COLUMNS) if config.input else None
        result = mh_sample_conditioned(state_generator(part), box, config.samples, config.chain,
                                       state_encoder(part), pool)
        path = self._path(config, "samples.csv")
        write_dataset(result.samples, path, DS_COLUMNS)
        self._extra = {"acceptance_rate": result.acceptance_rate, "box": box.to_mapping()}
        return [path]

    def simulate(self, config: RunConfig, args) -> List[str]:
        bundle = get_bundle_store(config.bundle).load()
        models = BundleModels(bundle)
        if config.input:
            frame = pd.read_csv(self._require_file(config.input, "initial states"), dtype={"instrument": str})
            initial = frame[EQV_NAMES].to_numpy(dtype=np.float64)
            names = list(frame["instrument"]) if "instrument" in frame else None
        else:
            initial = bundle.equity.reference_levels
            names = None
        if names is None:
            names = [f"INST{k + 1:03d}" for k in range(len(initial))]
        if config.instruments:
            initial, names = initial[:config.instruments], names[:config.instruments]
        if len(initial) == 0:
            raise DataError("no initial instrument states")

        sim = config.simulation.validate()
        run = portfolio_simulate(initial, config.step_boxes, sim.latent_draws, sim.state_draws, models,
                                 config.chain, sim.seed, sim.pair_sharing, instruments=names)
        paths = []
        for k, name in enumerate(run.instruments):
            path = self._path(config, f"trajectories_{name}.csv")
            trajectory_frame(run, k).to_csv(path, index=False, float_format="%.17g", na_rep="")
            paths.append(path)
            if run.depth:
                path = self._path(config, f"binned_{name}.csv")
                binned_frame(run, k, sim.bins).to_csv(path, index=False, float_format="%.17g")
                paths.append(path)
        self._extra = {
            "instruments": run.instruments,
            "trajectories": run.n_trajectories,
            "depth": run.depth,
            "latent_draws": sim.latent_draws,
            "state_draws": sim.state_draws,
            "mcmc_passes": run.mcmc_passes,
            "aborted": run.aborted,
            "boxes": [box.to_mapping() for box in run.boxes],
        }
        if run.aborted:
            logger.warning("%d trajectories aborted on non-positive levels", len(run.aborted))
        return paths

    # ============== Diagnostics ==============
    def evaluate(self, config: RunConfig, args) -> List[str]:
        real_frame = pd.read_csv(self._require_file(config.real or self._path(config, DS_HOLDOUT_FILE), "real samples"))
        if config.generated:
            generated_frame = pd.read_csv(self._require_file(config.generated, "generated samples"))
            columns = [c for c in real_frame.columns if c in generated_frame.columns]
            generated = generated_frame[columns].to_numpy(dtype=np.float64)
        else:
            columns = [c for c in DS_COLUMNS if c in real_frame.columns]
            if len(columns) != len(DS_COLUMNS):
                raise DataError(f"real samples need the state transition columns {DS_COLUMNS}")
            part = get_bundle_store(config.bundle).load().require("state")
            z = dc.philox_rng(config.seed, 70000).standard_normal((len(real_frame), 8))
            generated = state_generator(part)(z)
        if not columns:
            raise DataError("real and generated samples share no columns")
        real = real_frame[columns].to_numpy(dtype=np.float64)

        report = score_report(real, generated, columns)
        paths = [report.write(self._path(config, "scores.json"))]
        paths += triangle_export(real, generated, config.evaluation.bins, features=columns).write(config.out_dir)
        self._extra = {"s_ks": report.s_ks, "s_pca": report.s_pca}
        return paths

    def grad_check(self, config: RunConfig, args) -> List[str]:
        if args.bundle:
            networks = get_bundle_store(config.bundle).load().networks()
        else:
            networks = {network_id: build_standard(network_id, config.seed, stream)
                        for stream, network_id in enumerate(STANDARD_SPECS, start=1)}
        rng = dc.philox_rng(config.seed, 80000)
        reports = {}
        for index, (network_id, network) in enumerate(sorted(networks.items())):
            inputs = {name: rng.standard_normal((4,) + tuple(shape))
                      for name, shape in network.spec.inputs}
            report = dc.finite_difference_check(network, inputs, max_entries=args.entries,
                                                seed=dc.derive_seed(config.seed, index))
            logger.info("%s: max relative error %.3g, checked %d of %d entries", network_id,
                        report.max_relative_error, report.checked, report.total)
            reports[network_id] = report
        path = self._path(config, "gradcheck.json")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(canonical_json({name: r.to_dict() for name, r in reports.items()}))
        failed = [name for name, r in reports.items() if not r.passed]
        self._extra = {
            "passed": not failed,
            "checked": sum(r.checked for r in reports.values()),
            "total": sum(r.total for r in reports.values()),
        }
        if failed:
            self._write_manifest("grad-check", config, [path], self._extra)
            raise GradCheckFailed(f"gradient check failed for {', '.join(failed)}")
        return [path]


def _raw_levels(levels: np.ndarray, scaling) -> np.ndarray:
    raw = np.array(levels, dtype=np.float64)
    for j, spec in enumerate(EQV_FEATURES):
        if spec.normalization == "affine" and spec.name in scaling:
            raw[..., j] = affine_unscale(raw[..., j], *scaling[spec.name])
    return raw


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    return ScenarioLab().run(argv)


if __name__ == '__main__':
    sys.exit(run_command())
