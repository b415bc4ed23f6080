"""
Declarative network specifications and forward passes.

A network is data: an ordered list of ``LayerSpec`` rows, each naming the
earlier layers (or network inputs) it consumes. ``build_network`` audits
every declared output shape against the shape the layer actually computes
and initializes parameters from a seeded generator.

All activations are laid out (batch, channels, length).
"""

import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core import diffcore as dc
from core.errors import ConfigError, NetworkModeError, ShapeAuditError, ShapeMismatchError

logger = logging.getLogger(__name__)

LAYER_KINDS = ("linear", "conv1d", "conv1d_transpose", "concat", "identity")
NORMALIZATIONS = ("none", "batch", "spectral")
ACTIVATIONS = ("relu", "leaky_relu", "linear")

INIT_STD = 0.02
LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
SIGMA_FLOOR = 1e-12

Shape = Tuple[int, int]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: Tuple[str, ...]
    out_shape: Shape
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    normalization: str = "none"
    activation: str = "linear"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "out_shape": list(self.out_shape),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "normalization": self.normalization,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        return cls(
            name=data["name"],
            kind=data["kind"],
            inputs=tuple(data["inputs"]),
            out_shape=tuple(int(v) for v in data["out_shape"]),
            in_channels=int(data.get("in_channels", 0)),
            out_channels=int(data.get("out_channels", 0)),
            kernel=int(data.get("kernel", 1)),
            stride=int(data.get("stride", 1)),
            normalization=data.get("normalization", "none"),
            activation=data.get("activation", "linear"),
        )


@dataclass(frozen=True)
class NetworkSpec:
    network_id: str
    inputs: Tuple[Tuple[str, Shape], ...]
    layers: Tuple[LayerSpec, ...]
    latent_dim: int
    condition_dim: int = 0

    @property
    def input_shapes(self) -> Dict[str, Shape]:
        return dict(self.inputs)

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].out_shape

    def to_dict(self) -> dict:
        return {
            "network_id": self.network_id,
            "inputs": [[name, list(shape)] for name, shape in self.inputs],
            "layers": [layer.to_dict() for layer in self.layers],
            "latent_dim": self.latent_dim,
            "condition_dim": self.condition_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(
            network_id=data["network_id"],
            inputs=tuple((name, tuple(int(v) for v in shape)) for name, shape in data["inputs"]),
            layers=tuple(LayerSpec.from_dict(layer) for layer in data["layers"]),
            latent_dim=int(data["latent_dim"]),
            condition_dim=int(data.get("condition_dim", 0)),
        )


@dataclass
class SpectralNormState:
    u: np.ndarray
    iterations: int = 1
    sigma: float = float("nan")


# ---------------------------------------------------------------------------
# Standard architectures
# ---------------------------------------------------------------------------

def _convt(name, src, cin, cout, k, shape, norm="batch", act="relu", stride=1):
    return LayerSpec(name, "conv1d_transpose", (src,), shape, cin, cout, k, stride, norm, act)


def _conv(name, src, cin, cout, k, shape, norm, act="leaky_relu", stride=1):
    return LayerSpec(name, "conv1d", (src,), shape, cin, cout, k, stride, norm, act)


def _linear(name, src, fin, fout, shape, norm="none", act="linear"):
    return LayerSpec(name, "linear", (src,), shape, fin, fout, 1, 1, norm, act)


def gen_s_spec(latent_dim: int = 8, state_dim: int = 7) -> NetworkSpec:
    """State-transition generator: latent (8, 1) to (1, 7)"""
    layers = (
        _convt("ct1", "z", latent_dim, 256, 3, (256, 3)),
        _convt("ct2", "ct1", 256, 128, 3, (128, 5)),
        _convt("ct3", "ct2", 128, 64, 3, (64, 7)),
        _convt("out", "ct3", 64, 1, 1, (1, state_dim), norm="none", act="linear"),
    )
    return NetworkSpec("gen_S", (("z", (latent_dim, 1)),), layers, latent_dim)


def enc_z_spec(latent_dim: int = 8, state_dim: int = 7) -> NetworkSpec:
    """Encoder mapping a state transition (1, 7) back to latent (8, 1)"""
    layers = (
        _conv("c1", "x", 1, 64, 3, (64, 5), "batch"),
        _conv("c2", "c1", 64, 128, 3, (128, 3), "batch"),
        _conv("c3", "c2", 128, 256, 2, (256, 2), "batch"),
        _conv("c4", "c3", 256, 256, 2, (256, 1), "batch"),
        _linear("out", "c4", 256, latent_dim, (latent_dim, 1)),
    )
    return NetworkSpec("enc_Z", (("x", (1, state_dim)),), layers, latent_dim)


def disc_sz_spec(latent_dim: int = 8, state_dim: int = 7) -> NetworkSpec:
    """Joint discriminator over (state transition, latent) pairs"""
    layers = (
        _conv("x1", "x", 1, 64, 3, (64, 5), "spectral"),
        _conv("x2", "x1", 64, 128, 3, (128, 3), "spectral"),
        _conv("x3", "x2", 128, 256, 2, (256, 2), "spectral"),
        _conv("x4", "x3", 256, 256, 2, (256, 1), "spectral"),
        _linear("z1", "z", latent_dim, 64, (64, 1), "spectral", "leaky_relu"),
        _linear("z2", "z1", 64, 128, (128, 1), "spectral", "leaky_relu"),
        _linear("z3", "z2", 128, 256, (256, 1), "spectral", "leaky_relu"),
        LayerSpec("z4", "identity", ("z3",), (256, 1), activation="leaky_relu"),
        LayerSpec("cat", "concat", ("x4", "z4"), (512, 1)),
        _linear("j1", "cat", 512, 256, (256, 1), "spectral", "leaky_relu"),
        _linear("out", "j1", 256, 1, (1, 1), "spectral"),
    )
    inputs = (("x", (1, state_dim)), ("z", (latent_dim, 1)))
    return NetworkSpec("disc_SZ", inputs, layers, latent_dim)


def gen_e_spec(latent_dim: int = 8, condition_dim: int = 18, target_dim: int = 10) -> NetworkSpec:
    """Conditional instrument-transition generator"""
    layers = (
        _linear("cproj", "c", condition_dim, latent_dim, (latent_dim, 1), act="relu"),
        LayerSpec("cat", "concat", ("z", "cproj"), (2 * latent_dim, 1)),
        _convt("ct1", "cat", 2 * latent_dim, 512, 3, (512, 3)),
        _convt("ct2", "ct1", 512, 256, 3, (256, 5)),
        _convt("ct3", "ct2", 256, 128, 5, (128, 9)),
        _convt("ct4", "ct3", 128, 64, 2, (64, 10)),
        _linear("out", "ct4", 640, target_dim, (1, target_dim)),
    )
    inputs = (("z", (latent_dim, 1)), ("c", (1, condition_dim)))
    return NetworkSpec("gen_E", inputs, layers, latent_dim, condition_dim)


def disc_e_spec(condition_dim: int = 18, target_dim: int = 10) -> NetworkSpec:
    """Conditional discriminator; the condition is projected to the data width"""
    layers = (
        _linear("cproj", "c", condition_dim, target_dim, (1, target_dim), act="relu"),
        LayerSpec("cat", "concat", ("x", "cproj"), (2, target_dim)),
        _conv("c1", "cat", 2, 64, 1, (64, 10), "spectral"),
        _conv("c2", "c1", 64, 128, 2, (128, 5), "spectral", stride=2),
        _conv("c3", "c2", 128, 256, 3, (256, 3), "spectral"),
        _conv("c4", "c3", 256, 512, 1, (512, 3), "spectral"),
        _conv("out", "c4", 512, 1, 3, (1, 1), "spectral", act="linear"),
    )
    inputs = (("x", (1, target_dim)), ("c", (1, condition_dim)))
    return NetworkSpec("disc_E", inputs, layers, 0, condition_dim)


STANDARD_SPECS = {
    "gen_S": gen_s_spec,
    "enc_Z": enc_z_spec,
    "disc_SZ": disc_sz_spec,
    "gen_E": gen_e_spec,
    "disc_E": disc_e_spec,
}

# Input and output shapes every network of a given id must keep.
REQUIRED_IO = {
    "gen_S": ({"z": (8, 1)}, (1, 7)),
    "enc_Z": ({"x": (1, 7)}, (8, 1)),
    "disc_SZ": ({"x": (1, 7), "z": (8, 1)}, (1, 1)),
    "gen_E": ({"z": (8, 1), "c": (1, 18)}, (1, 10)),
    "disc_E": ({"x": (1, 10), "c": (1, 18)}, (1, 1)),
}


# ---------------------------------------------------------------------------
# Shape audit
# ---------------------------------------------------------------------------

def _computed_shape(layer: LayerSpec, sources: List[Shape]):
    if layer.kind == "concat":
        lengths = {s[1] for s in sources}
        if len(sources) < 2 or len(lengths) != 1:
            return None
        return (sum(s[0] for s in sources), sources[0][1])
    if len(sources) != 1:
        return None
    channels, length = sources[0]
    if layer.kind == "identity":
        return (channels, length)
    if layer.kind == "linear":
        if channels * length != layer.in_channels:
            return None
        return layer.out_shape if int(np.prod(layer.out_shape)) == layer.out_channels else (layer.out_channels,)
    if channels != layer.in_channels or layer.kernel < 1 or layer.stride < 1:
        return None
    if layer.kind == "conv1d":
        if length < layer.kernel:
            return None
        return (layer.out_channels, (length - layer.kernel) // layer.stride + 1)
    return (layer.out_channels, (length - 1) * layer.stride + layer.kernel)


def audit_shapes(spec: NetworkSpec) -> Dict[str, Shape]:
    """Evaluate every layer shape symbolically; returns name -> shape"""
    shapes: Dict[str, Shape] = dict(spec.input_shapes)
    for layer in spec.layers:
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"{spec.network_id}: unknown layer kind '{layer.kind}'")
        if layer.normalization not in NORMALIZATIONS or layer.activation not in ACTIVATIONS:
            raise ConfigError(f"{spec.network_id}: layer '{layer.name}' has unknown norm/activation")
        missing = [name for name in layer.inputs if name not in shapes]
        if missing:
            raise ShapeAuditError(spec.network_id, layer.name, layer.out_shape, f"undefined inputs {missing}")
        computed = _computed_shape(layer, [shapes[name] for name in layer.inputs])
        if computed != tuple(layer.out_shape):
            raise ShapeAuditError(spec.network_id, layer.name, tuple(layer.out_shape), computed)
        shapes[layer.name] = tuple(layer.out_shape)

    required = REQUIRED_IO.get(spec.network_id)
    if required is not None:
        inputs, output = required
        if spec.input_shapes != inputs:
            raise ShapeAuditError(spec.network_id, "<inputs>", inputs, spec.input_shapes)
        if spec.output_shape != output:
            raise ShapeAuditError(spec.network_id, spec.layers[-1].name, output, spec.output_shape)
    return shapes


# ---------------------------------------------------------------------------
# Spectral normalization
# ---------------------------------------------------------------------------

def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > SIGMA_FLOOR else vector


def estimate_sigma(matrix: np.ndarray, state: SpectralNormState, iterations: Optional[int] = None) -> float:
    """Largest singular value of ``matrix``, refining ``state.u`` in place.

    One iteration is the classical power step. Further iterations grow a
    Krylov basis of ``W^T W`` from the power-step direction and take its
    Ritz value, which converges far faster than repeated power steps.
    """
    iterations = state.iterations if iterations is None else iterations
    v = _unit(matrix.T @ state.u)
    if iterations > 1:
        basis = [v]
        for _ in range(iterations - 1):
            w = matrix.T @ (matrix @ basis[-1])
            for _ in range(2):
                for b in basis:
                    w = w - (b @ w) * b
            norm = np.linalg.norm(w)
            if norm <= 1e-13 * max(1.0, np.linalg.norm(matrix)):
                break
            basis.append(w / norm)
        V = np.stack(basis, axis=1)
        WV = matrix @ V
        _, vectors = np.linalg.eigh(WV.T @ WV)
        v = _unit(V @ vectors[:, -1])
    wv = matrix @ v
    sigma = float(np.linalg.norm(wv))
    if sigma > SIGMA_FLOOR:
        state.u = wv / sigma
    state.sigma = max(sigma, SIGMA_FLOOR)
    return state.sigma


def spectral_normalize(weight: np.ndarray, state: SpectralNormState, iterations: Optional[int] = None) -> np.ndarray:
    """Divide ``weight`` by its estimated largest singular value.

    The weight is viewed as (out-features, flattened-in); a zero matrix is
    divided by the floor instead of zero.
    """
    weight = np.asarray(weight, dtype=np.float64)
    matrix = weight.reshape(weight.shape[0], -1)
    sigma = estimate_sigma(matrix, state, iterations)
    return weight / sigma


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def _weight_shape(layer: LayerSpec) -> Tuple[int, ...]:
    if layer.kind == "linear":
        return (layer.out_channels, layer.in_channels)
    if layer.kind == "conv1d":
        return (layer.out_channels, layer.in_channels, layer.kernel)
    return (layer.in_channels, layer.out_channels, layer.kernel)


def tensor_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
    """Every stored tensor of a network: parameters, batchnorm buffers, spectral vectors"""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in spec.layers:
        if layer.kind in ("concat", "identity"):
            continue
        shapes[f"{layer.name}.weight"] = _weight_shape(layer)
        shapes[f"{layer.name}.bias"] = (layer.out_channels,)
        if layer.normalization == "batch":
            channels = layer.out_shape[0]
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{layer.name}.{suffix}"] = (channels,)
        elif layer.normalization == "spectral":
            shapes[f"{layer.name}.sn_u"] = (_weight_shape(layer)[0],)
    return shapes


def flatten(t: dc.Tensor) -> dc.Tensor:
    return dc.reshape(t, (t.shape[0], int(np.prod(t.shape[1:]))))


class Network:
    """A parameterized network built from a ``NetworkSpec``"""

    def __init__(self, spec: NetworkSpec, parameters: Dict[str, dc.Tensor],
                 buffers: Dict[str, np.ndarray], spectral: Dict[str, SpectralNormState]):
        self.spec = spec
        self.parameters = parameters
        self.buffers = buffers
        self.spectral = spectral
        self.spectral_enabled = True
        self.last_forward_spectral = False
        self._frozen_sigma: Optional[Dict[str, float]] = None

    @property
    def network_id(self) -> str:
        return self.spec.network_id

    @property
    def has_batchnorm(self) -> bool:
        return any(layer.normalization == "batch" for layer in self.spec.layers)

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters.values()))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def tensors(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view of everything needed to restore the network"""
        out = {name: p.data for name, p in self.parameters.items()}
        out.update(self.buffers)
        out.update({f"{name}.sn_u": state.u for name, state in self.spectral.items()})
        return out

    @classmethod
    def from_tensors(cls, spec: NetworkSpec, tensors: Mapping[str, np.ndarray]) -> "Network":
        audit_shapes(spec)
        parameters, buffers, spectral = {}, {}, {}
        for name in tensor_shapes(spec):
            value = np.array(tensors[name], dtype=np.float64)
            if name.endswith(".sn_u"):
                spectral[name[:-len(".sn_u")]] = SpectralNormState(value)
            elif name.endswith(".running_mean") or name.endswith(".running_var"):
                buffers[name] = value
            else:
                parameters[name] = dc.parameter(value, name)
        return cls(spec, parameters, buffers, spectral)

    def load_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        """Overwrite parameters, batchnorm buffers and spectral vectors in place"""
        for name, p in self.parameters.items():
            p.data = np.array(tensors[name], dtype=np.float64)
        for name in self.buffers:
            self.buffers[name] = np.array(tensors[name], dtype=np.float64)
        for name, state in self.spectral.items():
            state.u = np.array(tensors[f"{name}.sn_u"], dtype=np.float64)

    def __call__(self, inputs, mode: str = "infer", **kwargs) -> dc.Tensor:
        return self.forward(inputs, mode, **kwargs)

    @contextmanager
    def frozen_spectral(self):
        """Treat every spectral scale as a constant taken from the current weights"""
        previous = self._frozen_sigma
        frozen = {}
        for name, state in self.spectral.items():
            w = self.parameters[f"{name}.weight"].data
            matrix = w.reshape(w.shape[0], -1)
            v = _unit(matrix.T @ state.u)
            frozen[name] = max(float(state.u @ matrix @ v), SIGMA_FLOOR)
        self._frozen_sigma = frozen
        try:
            yield self
        finally:
            self._frozen_sigma = previous

    def _bind_inputs(self, inputs) -> Tuple[Dict[str, dc.Tensor], int]:
        expected = self.spec.inputs
        if isinstance(inputs, Mapping):
            missing = [name for name, _ in expected if name not in inputs]
            if missing:
                raise ShapeMismatchError(self.network_id, f"missing inputs {missing}")
            given = [inputs[name] for name, _ in expected]
        elif isinstance(inputs, (list, tuple)):
            given = list(inputs)
        else:
            given = [inputs]
        if len(given) != len(expected):
            raise ShapeMismatchError(self.network_id, (len(given), len(expected)))

        bound, batch = {}, None
        for (name, shape), value in zip(expected, given):
            t = dc.as_tensor(value)
            if t.ndim == 2 and t.shape[1] == shape[0] * shape[1]:
                t = dc.reshape(t, (t.shape[0],) + tuple(shape))
            if t.ndim != 3 or t.shape[1:] != tuple(shape) or t.shape[0] < 1:
                raise ShapeMismatchError(self.network_id, (name, t.shape, shape))
            if batch is not None and t.shape[0] != batch:
                raise ShapeMismatchError(self.network_id, ("batch", batch, t.shape[0]))
            batch = t.shape[0]
            bound[name] = t
        return bound, batch

    def _weight(self, layer: LayerSpec, update_spectral: bool) -> dc.Tensor:
        weight = self.parameters[f"{layer.name}.weight"]
        if layer.normalization != "spectral" or not self.spectral_enabled:
            return weight
        axes = tuple(range(weight.ndim))
        if self._frozen_sigma is not None:
            return dc.scale(weight, 1.0 / self._frozen_sigma[layer.name])
        state = self.spectral[layer.name]
        matrix = weight.data.reshape(weight.shape[0], -1)
        if update_spectral:
            estimate_sigma(matrix, state)
        v = _unit(matrix.T @ state.u)
        outer = np.outer(state.u, v).reshape(weight.shape)
        sigma = dc.reduce_sum(dc.mul(weight, dc.constant(outer)))
        if sigma.item() <= SIGMA_FLOOR:
            return dc.scale(weight, 1.0 / SIGMA_FLOOR)
        return dc.mul(weight, dc.broadcast(dc.power(sigma, -1.0), weight.shape, axes))

    def _batchnorm(self, layer: LayerSpec, x: dc.Tensor, mode: str, update_running: bool,
                   stats: Optional[dict]) -> dc.Tensor:
        gamma = self.parameters[f"{layer.name}.gamma"]
        beta = self.parameters[f"{layer.name}.beta"]
        mean_key, var_key = f"{layer.name}.running_mean", f"{layer.name}.running_var"
        if mode == "infer":
            return dc.batchnorm_infer(x, gamma, beta, self.buffers[mean_key], self.buffers[var_key], BN_EPS)
        batch_stats: dict = {}
        out = dc.batchnorm_train(x, gamma, beta, BN_EPS, stats=batch_stats)
        count = batch_stats["count"]
        unbiased = batch_stats["var"] * count / max(count - 1, 1)
        if update_running:
            self.buffers[mean_key] = BN_MOMENTUM * self.buffers[mean_key] + (1 - BN_MOMENTUM) * batch_stats["mean"]
            self.buffers[var_key] = BN_MOMENTUM * self.buffers[var_key] + (1 - BN_MOMENTUM) * unbiased
        if stats is not None:
            stats[layer.name] = (batch_stats["mean"], unbiased)
        return out

    def forward(self, inputs, mode: str = "infer", update_spectral: bool = False,
                update_running: bool = True, stats: Optional[dict] = None) -> dc.Tensor:
        """Run the network; the result is (batch,) + the declared output shape.

        In train mode batchnorm uses batch statistics (and refreshes the
        running averages unless ``update_running`` is false); spectral
        vectors are refined only when ``update_spectral`` is set.
        """
        if mode not in ("train", "infer"):
            raise NetworkModeError(f"unknown mode '{mode}'")
        values, batch = self._bind_inputs(inputs)
        if mode == "train" and batch < 2 and self.has_batchnorm:
            raise NetworkModeError(f"{self.network_id}: train mode needs batch size >= 2 with batchnorm")

        used_spectral = False
        for layer in self.spec.layers:
            args = [values[name] for name in layer.inputs]
            if layer.kind == "concat":
                out = dc.concat(args, axis=1)
            elif layer.kind == "identity":
                out = args[0]
            else:
                weight = self._weight(layer, update_spectral and mode == "train")
                used_spectral |= layer.normalization == "spectral" and self.spectral_enabled
                bias = self.parameters[f"{layer.name}.bias"]
                if layer.kind == "linear":
                    out = dc.linear(flatten(args[0]), weight, bias)
                    out = dc.reshape(out, (batch,) + tuple(layer.out_shape))
                elif layer.kind == "conv1d":
                    out = dc.conv1d(args[0], weight, bias, layer.stride)
                else:
                    out = dc.conv1d_transpose(args[0], weight, bias, layer.stride)
            if layer.normalization == "batch":
                out = self._batchnorm(layer, out, mode, update_running, stats)
            if layer.activation == "relu":
                out = dc.relu(out)
            elif layer.activation == "leaky_relu":
                out = dc.leaky_relu(out, LEAKY_SLOPE)
            values[layer.name] = out

        self.last_forward_spectral = used_spectral
        return values[self.spec.layers[-1].name]


def build_network(spec: NetworkSpec, seed: int, stream: int = 0) -> Network:
    """Audit ``spec`` and initialize a network from ``seed``"""
    audit_shapes(spec)
    rng = dc.philox_rng(seed, stream)
    parameters: Dict[str, dc.Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    spectral: Dict[str, SpectralNormState] = {}
    for layer in spec.layers:
        if layer.kind in ("concat", "identity"):
            continue
        parameters[f"{layer.name}.weight"] = dc.parameter(
            rng.normal(0.0, INIT_STD, size=_weight_shape(layer)), f"{layer.name}.weight")
        parameters[f"{layer.name}.bias"] = dc.parameter(np.zeros(layer.out_channels), f"{layer.name}.bias")
        if layer.normalization == "batch":
            channels = layer.out_shape[0]
            parameters[f"{layer.name}.gamma"] = dc.parameter(np.ones(channels), f"{layer.name}.gamma")
            parameters[f"{layer.name}.beta"] = dc.parameter(np.zeros(channels), f"{layer.name}.beta")
            buffers[f"{layer.name}.running_mean"] = np.zeros(channels)
            buffers[f"{layer.name}.running_var"] = np.ones(channels)
        elif layer.normalization == "spectral":
            rows = _weight_shape(layer)[0]
            spectral[layer.name] = SpectralNormState(_unit(rng.standard_normal(rows)))
    logger.debug("built %s with %d parameters", spec.network_id,
                 int(sum(p.size for p in parameters.values())))
    return Network(spec, parameters, buffers, spectral)


def build_standard(network_id: str, seed: int, stream: int = 0) -> Network:
    try:
        factory = STANDARD_SPECS[network_id]
    except KeyError:
        raise ConfigError(f"unknown network '{network_id}'") from None
    return build_network(factory(), seed, stream)


def finalize_batchnorm(network: Network, batches: Sequence) -> None:
    """Replace running statistics with population estimates.

    Each element of ``batches`` is a network input; the per-layer batch
    means and unbiased variances are averaged over all of them.
    """
    if not network.has_batchnorm or not batches:
        return
    sums: Dict[str, List[np.ndarray]] = {}
    with dc.no_grad():
        for inputs in batches:
            stats: dict = {}
            network.forward(inputs, mode="train", update_running=False, stats=stats)
            for name, (mean, var) in stats.items():
                acc = sums.setdefault(name, [np.zeros_like(mean), np.zeros_like(var)])
                acc[0] += mean
                acc[1] += var
    for name, (mean_sum, var_sum) in sums.items():
        network.buffers[f"{name}.running_mean"] = mean_sum / len(batches)
        network.buffers[f"{name}.running_var"] = var_sum / len(batches)
    logger.info("finalized batchnorm statistics of %s over %d batches", network.network_id, len(batches))
