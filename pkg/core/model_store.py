import os
import json
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.datapipe import FEATURE_SPECS, Standardizer
from core.errors import (
    BundleChecksumError,
    BundleError,
    BundleShapeError,
    BundleVersionError,
    MissingBundlePartError,
)
from core.netlib import Network, NetworkSpec, tensor_shapes

"""
Versioned model-bundle storage.

A bundle is a directory holding a canonical JSON manifest and one binary
blob of little-endian float64 values. The manifest lists every tensor with
its shape and offset (in values) plus the SHA-256 of the blob.
"""

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_FILE = "manifest.json"
BLOB_FILE = "tensors.bin"
MANIFEST_KEYS = ("blob", "tensors", "parts")
PART_NETWORKS = {
    "state": ("gen_S", "enc_Z", "disc_SZ"),
    "equity": ("gen_E", "disc_E"),
}


def canonical_json(document) -> str:
    return json.dumps(document, sort_keys=True, indent=2) + "\n"


@dataclass
class StatePart:
    gen_s: Network
    enc_z: Network
    disc_sz: Network
    standardizer: Standardizer
    fingerprint: dict = field(default_factory=dict)

    @property
    def networks(self) -> Dict[str, Network]:
        return {"gen_S": self.gen_s, "enc_Z": self.enc_z, "disc_SZ": self.disc_sz}

    def metadata(self) -> dict:
        return {"standardizer": self.standardizer.to_dict()}


@dataclass
class EquityPart:
    gen_e: Network
    disc_e: Network
    condition: Standardizer
    target: Standardizer
    scaling: Dict[str, Tuple[float, float]]
    reference_levels: np.ndarray  # raw EQV levels (rows, 11)
    fingerprint: dict = field(default_factory=dict)

    @property
    def networks(self) -> Dict[str, Network]:
        return {"gen_E": self.gen_e, "disc_E": self.disc_e}

    def metadata(self) -> dict:
        return {
            "condition": self.condition.to_dict(),
            "target": self.target.to_dict(),
            "scaling": {name: list(bounds) for name, bounds in sorted(self.scaling.items())},
            "reference_levels": np.asarray(self.reference_levels).tolist(),
        }


@dataclass
class ModelBundle:
    state: Optional[StatePart] = None
    equity: Optional[EquityPart] = None

    def require(self, part: str):
        value = getattr(self, part, None)
        if value is None:
            raise MissingBundlePartError(f"bundle has no '{part}' part; run train-{part} first")
        return value

    def networks(self) -> Dict[str, Network]:
        out = {}
        for part in (self.state, self.equity):
            if part is not None:
                out.update(part.networks)
        return out


class BundleStore:
    """Reads and writes model bundles under one directory"""

    def __init__(self, bundle_dir: str):
        self.bundle_dir = bundle_dir

    def _ensure_dir_exists(self):
        if not os.path.exists(self.bundle_dir):
            os.makedirs(self.bundle_dir)

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.bundle_dir, MANIFEST_FILE)

    @property
    def blob_path(self) -> str:
        return os.path.join(self.bundle_dir, BLOB_FILE)

    def exists(self) -> bool:
        return os.path.exists(self.manifest_path)

    # ------------------------------------------------------------------ save

    def save(self, bundle: ModelBundle) -> str:
        """Write ``bundle``; identical bundles produce identical bytes"""
        self._ensure_dir_exists()
        entries: List[dict] = []
        chunks: List[bytes] = []
        offset = 0
        parts = {}
        for part_name in sorted(PART_NETWORKS):
            part = getattr(bundle, part_name)
            if part is None:
                continue
            networks = {}
            for network_id in PART_NETWORKS[part_name]:
                network = part.networks[network_id]
                networks[network_id] = {
                    "spec": network.spec.to_dict(),
                    "spectral_enabled": network.spectral_enabled,
                }
                for name, value in sorted(network.tensors().items()):
                    data = np.ascontiguousarray(value, dtype="<f8")
                    entries.append({
                        "name": f"{network_id}/{name}",
                        "shape": list(data.shape),
                        "offset": offset,
                        "count": int(data.size),
                    })
                    chunks.append(data.tobytes())
                    offset += int(data.size)
            parts[part_name] = {
                "networks": networks,
                "metadata": part.metadata(),
                "fingerprint": part.fingerprint,
            }

        blob = b"".join(chunks)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "feature_specs": [
                {"name": f.name, "group": f.group, "kind": f.kind, "normalization": f.normalization}
                for f in FEATURE_SPECS
            ],
            "parts": parts,
            "tensors": entries,
            "blob": {"file": BLOB_FILE, "sha256": hashlib.sha256(blob).hexdigest(), "values": offset},
        }
        with open(self.blob_path, "wb") as f:
            f.write(blob)
        with open(self.manifest_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(canonical_json(manifest))
        logger.info("wrote bundle %s (parts: %s)", self.bundle_dir, ", ".join(parts) or "none")
        return self.manifest_path

    def save_part(self, part_name: str, part) -> str:
        """Merge one part into the bundle, keeping the other part if present"""
        bundle = self.load() if self.exists() else ModelBundle()
        setattr(bundle, part_name, part)
        return self.save(bundle)

    # ------------------------------------------------------------------ load

    def load(self) -> ModelBundle:
        if not self.exists():
            raise BundleError(f"no bundle manifest at {self.manifest_path}")
        try:
            with open(self.manifest_path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise BundleChecksumError(f"manifest is not valid JSON: {e}") from None
        if not isinstance(manifest, dict):
            raise BundleError(f"{self.manifest_path}: manifest must be a JSON object")

        version = manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise BundleVersionError(f"bundle schema version {version!r} is not supported (expected {SCHEMA_VERSION})")
        for key in MANIFEST_KEYS:
            if key not in manifest:
                raise BundleError(f"{self.manifest_path}: manifest has no '{key}' entry")
        try:
            return self._read(manifest)
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise BundleError(f"{self.manifest_path}: malformed manifest ({type(e).__name__}: {e})") from None

    def _read(self, manifest: dict) -> ModelBundle:
        try:
            with open(self.blob_path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise BundleChecksumError(f"cannot read tensor blob: {e}") from None
        if hashlib.sha256(blob).hexdigest() != manifest["blob"]["sha256"]:
            raise BundleChecksumError(f"{self.blob_path}: checksum mismatch")
        values = np.frombuffer(blob, dtype="<f8")

        tensors: Dict[str, Dict[str, np.ndarray]] = {}
        for entry in manifest["tensors"]:
            network_id, name = entry["name"].split("/", 1)
            start, count = entry["offset"], entry["count"]
            if start + count > values.size:
                raise BundleChecksumError(f"tensor '{entry['name']}' runs past the end of the blob")
            shape = tuple(entry["shape"])
            if int(np.prod(shape)) != count:
                raise BundleShapeError(entry["name"], count, shape)
            tensors.setdefault(network_id, {})[name] = values[start:start + count].astype(np.float64).reshape(shape)

        bundle = ModelBundle()
        for part_name, part in manifest["parts"].items():
            networks = {}
            for network_id, info in part["networks"].items():
                networks[network_id] = self._restore_network(network_id, info, tensors.get(network_id, {}))
            meta = part["metadata"]
            if part_name == "state":
                bundle.state = StatePart(
                    networks["gen_S"], networks["enc_Z"], networks["disc_SZ"],
                    Standardizer.from_dict(meta["standardizer"]), part.get("fingerprint", {}))
            elif part_name == "equity":
                bundle.equity = EquityPart(
                    networks["gen_E"], networks["disc_E"],
                    Standardizer.from_dict(meta["condition"]), Standardizer.from_dict(meta["target"]),
                    {name: tuple(bounds) for name, bounds in meta["scaling"].items()},
                    np.asarray(meta["reference_levels"], dtype=np.float64),
                    part.get("fingerprint", {}))
            else:
                raise BundleError(f"unknown bundle part '{part_name}'")
        logger.info("loaded bundle %s", self.bundle_dir)
        return bundle

    @staticmethod
    def _restore_network(network_id: str, info: dict, tensors: Dict[str, np.ndarray]) -> Network:
        spec = NetworkSpec.from_dict(info["spec"])
        for name, shape in tensor_shapes(spec).items():
            if name not in tensors:
                raise BundleShapeError(f"{network_id}/{name}", shape, None)
            if tensors[name].shape != tuple(shape):
                raise BundleShapeError(f"{network_id}/{name}", tuple(shape), tensors[name].shape)
        network = Network.from_tensors(spec, tensors)
        network.spectral_enabled = bool(info.get("spectral_enabled", True))
        return network


_bundle_stores: Dict[str, BundleStore] = {}


def get_bundle_store(bundle_dir: str) -> BundleStore:
    """Shared store per bundle directory"""
    key = os.path.abspath(bundle_dir)
    if key not in _bundle_stores:
        _bundle_stores[key] = BundleStore(bundle_dir)
    return _bundle_stores[key]
