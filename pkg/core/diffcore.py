"""
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every value is a float64 numpy array wrapped in a ``Tensor``. Operations on
tensors that require gradients append a ``TapeNode`` linking the output to its
inputs; ``backward`` walks those nodes in reverse creation order. Backward
rules are written with the same primitives, so gradients can themselves be
differentiated (``create_graph=True``), which the gradient penalty relies on.

Convolutions are expressed through two linear index primitives, ``take``
(gather) and ``scatter`` (scatter-add), which are each other's adjoint.
"""

import itertools
import logging
import threading
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import (
    ConfigError,
    EmptyTapeError,
    NonScalarLossError,
    NumericOverflowError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

_SEQUENCE = itertools.count()
_GRAD_STATE = threading.local()


def philox_rng(seed: int, *substream: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional substream path"""
    if seed is None or int(seed) < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    entropy = [int(seed)] + [int(s) for s in substream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *substream: int) -> int:
    """Integer seed for a named substream of ``seed``"""
    entropy = [int(seed)] + [int(s) for s in substream]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def grad_mode(enabled: bool):
    previous = is_grad_enabled()
    _GRAD_STATE.enabled = enabled
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def no_grad():
    return grad_mode(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Optional["TapeNode"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLossError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


@dataclass(eq=False)
class TapeNode:
    kind: str
    inputs: Tuple[Tensor, ...]
    saved: dict
    seq: int


# ---------------------------------------------------------------------------
# Elementary primitives: forward(arrays, attrs) -> (output, saved) and a
# vector-Jacobian product vjp(node, grad) -> per-input gradient tensors.
# ---------------------------------------------------------------------------

_ELEMENTARY: Dict[str, Tuple[Callable, Callable]] = {}


def _elementary(kind: str, forward: Callable, vjp: Callable):
    _ELEMENTARY[kind] = (forward, vjp)


def _run(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    forward, _ = _ELEMENTARY[kind]
    attrs = attrs or {}
    out = forward([t.data for t in inputs], attrs)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(kind)
    result = Tensor(out)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = TapeNode(kind, tuple(inputs), attrs, next(_SEQUENCE))
    return result


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(kind, (a.shape, b.shape))


def _normalize_axes(axes, ndim) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _add_forward(arrays, attrs):
    a, b = arrays
    _same_shape("add", a, b)
    return a + b


def _add_vjp(node, g):
    return [g, g]


def _bias_add_forward(arrays, attrs):
    x, b = arrays
    if x.ndim < 2 or b.shape != (x.shape[1],):
        raise ShapeMismatchError("bias_add", (x.shape, b.shape))
    return x + b.reshape((1, -1) + (1,) * (x.ndim - 2))


def _bias_add_vjp(node, g):
    x = node.inputs[0]
    axes = tuple(a for a in range(x.ndim) if a != 1)
    return [g, reduce_sum(g, axes)]


def _mul_forward(arrays, attrs):
    a, b = arrays
    _same_shape("mul", a, b)
    return a * b


def _mul_vjp(node, g):
    a, b = node.inputs
    return [
        mul(g, b) if a.requires_grad else None,
        mul(g, a) if b.requires_grad else None,
    ]


def _scale_forward(arrays, attrs):
    return arrays[0] * attrs["factor"]


def _scale_vjp(node, g):
    return [scale(g, node.saved["factor"])]


def _add_const_forward(arrays, attrs):
    return arrays[0] + attrs["value"]


def _add_const_vjp(node, g):
    return [g]


def _pow_forward(arrays, attrs):
    with np.errstate(all="ignore"):
        return np.power(arrays[0], attrs["exponent"])


def _pow_vjp(node, g):
    x = node.inputs[0]
    p = node.saved["exponent"]
    return [mul(g, scale(power(x, p - 1.0), p))]


def _abs_forward(arrays, attrs):
    return np.abs(arrays[0])


def _abs_vjp(node, g):
    return [mul(g, constant(np.sign(node.inputs[0].data)))]


def _relu_forward(arrays, attrs):
    return np.maximum(arrays[0], 0.0)


def _relu_vjp(node, g):
    return [mul(g, constant((node.inputs[0].data > 0).astype(np.float64)))]


def _leaky_relu_forward(arrays, attrs):
    x = arrays[0]
    return np.where(x > 0, x, attrs["slope"] * x)


def _leaky_relu_vjp(node, g):
    x = node.inputs[0].data
    return [mul(g, constant(np.where(x > 0, 1.0, node.saved["slope"])))]


def _min_const_forward(arrays, attrs):
    return np.minimum(arrays[0], attrs["value"])


def _min_const_vjp(node, g):
    x = node.inputs[0].data
    return [mul(g, constant((x < node.saved["value"]).astype(np.float64)))]


def _matmul_forward(arrays, attrs):
    a, b = arrays
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", (a.shape, b.shape))
    return a @ b


def _matmul_vjp(node, g):
    a, b = node.inputs
    return [
        matmul(g, transpose(b)) if a.requires_grad else None,
        matmul(transpose(a), g) if b.requires_grad else None,
    ]


def _transpose_forward(arrays, attrs):
    if arrays[0].ndim != 2:
        raise ShapeMismatchError("transpose", (arrays[0].shape,))
    return np.ascontiguousarray(arrays[0].T)


def _transpose_vjp(node, g):
    return [transpose(g)]


def _reshape_forward(arrays, attrs):
    x = arrays[0]
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatchError("reshape", (x.shape, shape))
    return x.reshape(shape)


def _reshape_vjp(node, g):
    return [reshape(g, node.inputs[0].shape)]


def _reduce_sum_forward(arrays, attrs):
    return np.asarray(np.sum(arrays[0], axis=attrs["axes"]))


def _reduce_sum_vjp(node, g):
    x = node.inputs[0]
    return [broadcast(g, x.shape, node.saved["axes"])]


def _broadcast_forward(arrays, attrs):
    x = arrays[0]
    shape, axes = tuple(attrs["shape"]), attrs["axes"]
    expanded = np.expand_dims(x, axes) if axes else x
    try:
        return np.broadcast_to(expanded, shape).copy()
    except ValueError:
        raise ShapeMismatchError("broadcast", (x.shape, shape)) from None


def _broadcast_vjp(node, g):
    return [reduce_sum(g, node.saved["axes"])]


def _take_forward(arrays, attrs):
    x = arrays[0]
    index = attrs["index"]
    if index.size and (index.max() >= x.size or index.min() < 0):
        raise ShapeMismatchError("take", (x.shape, index.shape))
    return x.reshape(-1)[index]


def _take_vjp(node, g):
    return [scatter(g, node.saved["index"], node.inputs[0].shape)]


def _scatter_forward(arrays, attrs):
    x = arrays[0]
    index, shape = attrs["index"], tuple(attrs["shape"])
    if index.shape != x.shape:
        raise ShapeMismatchError("scatter", (x.shape, index.shape))
    size = int(np.prod(shape))
    flat = np.bincount(index.reshape(-1), weights=x.reshape(-1), minlength=size)
    return flat.reshape(shape)


def _scatter_vjp(node, g):
    return [take(g, node.saved["index"])]


def _concat_forward(arrays, attrs):
    axis = attrs["axis"]
    reference = arrays[0]
    for other in arrays[1:]:
        if other.ndim != reference.ndim or any(
            other.shape[d] != reference.shape[d] for d in range(reference.ndim) if d != axis
        ):
            raise ShapeMismatchError("concat", tuple(a.shape for a in arrays))
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(node, g):
    axis = node.saved["axis"]
    positions = np.arange(g.size).reshape(g.shape)
    grads, start = [], 0
    for t in node.inputs:
        stop = start + t.shape[axis]
        if t.requires_grad:
            index = np.take(positions, np.arange(start, stop), axis=axis)
            grads.append(take(g, index))
        else:
            grads.append(None)
        start = stop
    return grads


_elementary("add", _add_forward, _add_vjp)
_elementary("bias_add", _bias_add_forward, _bias_add_vjp)
_elementary("mul", _mul_forward, _mul_vjp)
_elementary("scale", _scale_forward, _scale_vjp)
_elementary("add_const", _add_const_forward, _add_const_vjp)
_elementary("pow", _pow_forward, _pow_vjp)
_elementary("abs", _abs_forward, _abs_vjp)
_elementary("relu", _relu_forward, _relu_vjp)
_elementary("leaky_relu", _leaky_relu_forward, _leaky_relu_vjp)
_elementary("min_const", _min_const_forward, _min_const_vjp)
_elementary("matmul", _matmul_forward, _matmul_vjp)
_elementary("transpose", _transpose_forward, _transpose_vjp)
_elementary("reshape", _reshape_forward, _reshape_vjp)
_elementary("reduce_sum", _reduce_sum_forward, _reduce_sum_vjp)
_elementary("broadcast", _broadcast_forward, _broadcast_vjp)
_elementary("take", _take_forward, _take_vjp)
_elementary("scatter", _scatter_forward, _scatter_vjp)
_elementary("concat", _concat_forward, _concat_vjp)


# Thin functional wrappers ----------------------------------------------------

def add(a, b) -> Tensor:
    return _run("add", [as_tensor(a), as_tensor(b)])


def bias_add(x, b) -> Tensor:
    return _run("bias_add", [as_tensor(x), as_tensor(b)])


def mul(a, b) -> Tensor:
    return _run("mul", [as_tensor(a), as_tensor(b)])


def scale(x, factor: float) -> Tensor:
    return _run("scale", [as_tensor(x)], {"factor": float(factor)})


def add_const(x, value: float) -> Tensor:
    return _run("add_const", [as_tensor(x)], {"value": float(value)})


def power(x, exponent: float) -> Tensor:
    return _run("pow", [as_tensor(x)], {"exponent": float(exponent)})


def absolute(x) -> Tensor:
    return _run("abs", [as_tensor(x)])


def relu(x) -> Tensor:
    return _run("relu", [as_tensor(x)])


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return _run("leaky_relu", [as_tensor(x)], {"slope": float(slope)})


def min_const(x, value: float) -> Tensor:
    return _run("min_const", [as_tensor(x)], {"value": float(value)})


def matmul(a, b) -> Tensor:
    return _run("matmul", [as_tensor(a), as_tensor(b)])


def transpose(x) -> Tensor:
    return _run("transpose", [as_tensor(x)])


def reshape(x, shape) -> Tensor:
    return _run("reshape", [as_tensor(x)], {"shape": tuple(int(s) for s in shape)})


def reduce_sum(x, axes=None) -> Tensor:
    x = as_tensor(x)
    return _run("reduce_sum", [x], {"axes": _normalize_axes(axes, x.ndim)})


def reduce_mean(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeMismatchError("reduce_mean", (x.shape, axes))
    return scale(reduce_sum(x, axes), 1.0 / count)


def broadcast(x, shape, axes) -> Tensor:
    x = as_tensor(x)
    return _run("broadcast", [x], {"shape": tuple(shape), "axes": _normalize_axes(axes, len(shape))})


def take(x, index) -> Tensor:
    return _run("take", [as_tensor(x)], {"index": np.asarray(index, dtype=np.int64)})


def scatter(x, index, shape) -> Tensor:
    return _run("scatter", [as_tensor(x)], {"index": np.asarray(index, dtype=np.int64), "shape": tuple(shape)})


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat", ())
    return _run("concat", tensors, {"axis": axis % tensors[0].ndim})


def subtract(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


# Composite primitives ---------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` on a (batch, features) input"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError("linear", (x.shape, weight.shape))
    out = matmul(x, transpose(weight))
    return bias_add(out, bias) if bias is not None else out


@lru_cache(maxsize=256)
def _unfold_index(batch, channels, length, kernel, stride):
    out_length = (length - kernel) // stride + 1
    index = (
        np.arange(batch)[:, None, None, None] * channels * length
        + np.arange(out_length)[None, :, None, None] * stride
        + np.arange(channels)[None, None, :, None] * length
        + np.arange(kernel)[None, None, None, :]
    )
    index.setflags(write=False)
    return index


@lru_cache(maxsize=256)
def _swap_index(batch, rows, cols):
    """Index turning (batch*rows, cols) into (batch, cols, rows)"""
    index = np.arange(batch * rows * cols).reshape(batch, rows, cols).transpose(0, 2, 1).copy()
    index.setflags(write=False)
    return index


@lru_cache(maxsize=256)
def _fold_index(batch, length, out_channels, kernel, stride):
    out_length = (length - 1) * stride + kernel
    index = (
        np.arange(batch)[:, None, None, None] * out_channels * out_length
        + np.arange(length)[None, :, None, None] * stride
        + np.arange(out_channels)[None, None, :, None] * out_length
        + np.arange(kernel)[None, None, None, :]
    ).reshape(batch * length, out_channels * kernel)
    index.setflags(write=False)
    return index


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D convolution; x is (B, C, L), weight is (O, C, K)"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1] or stride < 1:
        raise ShapeMismatchError("conv1d", (x.shape, weight.shape, stride))
    batch, channels, length = x.shape
    out_channels, _, kernel = weight.shape
    if length < kernel:
        raise ShapeMismatchError("conv1d", (x.shape, weight.shape, stride))
    out_length = (length - kernel) // stride + 1
    cols = take(x, _unfold_index(batch, channels, length, kernel, stride))
    cols = reshape(cols, (batch * out_length, channels * kernel))
    out = matmul(cols, transpose(reshape(weight, (out_channels, channels * kernel))))
    out = take(out, _swap_index(batch, out_length, out_channels))
    return bias_add(out, bias) if bias is not None else out


def conv1d_transpose(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Transposed convolution; x is (B, C, L), weight is (C, O, K).

    Output length is ``(L - 1) * stride + K`` with no padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0] or stride < 1:
        raise ShapeMismatchError("conv1d_transpose", (x.shape, weight.shape, stride))
    batch, channels, length = x.shape
    _, out_channels, kernel = weight.shape
    out_length = (length - 1) * stride + kernel
    rows = take(x, _swap_index(batch, channels, length))
    rows = reshape(rows, (batch * length, channels))
    spread = matmul(rows, reshape(weight, (channels, out_channels * kernel)))
    out = scatter(spread, _fold_index(batch, length, out_channels, kernel, stride),
                  (batch, out_channels, out_length))
    return bias_add(out, bias) if bias is not None else out


def l1_norm(x, axes=None) -> Tensor:
    return reduce_sum(absolute(x), axes)


def l2_norm(x, axes=None, eps: float = 1e-12) -> Tensor:
    return power(add_const(reduce_sum(mul(x, x), axes), eps), 0.5)


def _channel_axes(x: Tensor) -> Tuple[int, ...]:
    return tuple(a for a in range(x.ndim) if a != 1)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5, stats: Optional[dict] = None) -> Tensor:
    """Normalize with batch statistics per channel (axis 1).

    When ``stats`` is given it receives the batch mean, biased variance and
    the number of values each statistic was computed over.
    """
    x = as_tensor(x)
    if x.ndim < 2 or as_tensor(gamma).shape != (x.shape[1],):
        raise ShapeMismatchError("batchnorm_train", (x.shape, as_tensor(gamma).shape))
    axes = _channel_axes(x)
    mu = reduce_mean(x, axes)
    centered = subtract(x, broadcast(mu, x.shape, axes))
    var = reduce_mean(mul(centered, centered), axes)
    inv_std = power(add_const(var, eps), -0.5)
    out = mul(centered, broadcast(inv_std, x.shape, axes))
    out = mul(out, broadcast(gamma, x.shape, axes))
    if stats is not None:
        stats["mean"] = mu.data.copy()
        stats["var"] = var.data.copy()
        stats["count"] = int(np.prod([x.shape[a] for a in axes]))
    return bias_add(out, beta)


def batchnorm_infer(x, gamma, beta, running_mean, running_var, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    running_mean = np.asarray(running_mean, dtype=np.float64)
    running_var = np.asarray(running_var, dtype=np.float64)
    if x.ndim < 2 or running_mean.shape != (x.shape[1],) or running_var.shape != (x.shape[1],):
        raise ShapeMismatchError("batchnorm_infer", (x.shape, running_mean.shape))
    axes = _channel_axes(x)
    centered = bias_add(x, constant(-running_mean))
    factor = mul(gamma, constant(1.0 / np.sqrt(running_var + eps)))
    return bias_add(mul(centered, broadcast(factor, x.shape, axes)), beta)


_PUBLIC: Dict[str, Callable[[List[Tensor], dict], Tensor]] = {
    "matmul": lambda xs, a: matmul(*xs),
    "add": lambda xs, a: add(*xs),
    "mul": lambda xs, a: mul(*xs),
    "concat": lambda xs, a: concat(xs, a.get("axis", 1)),
    "conv1d": lambda xs, a: conv1d(*xs, stride=a.get("stride", 1)),
    "conv1d_transpose": lambda xs, a: conv1d_transpose(*xs, stride=a.get("stride", 1)),
    "relu": lambda xs, a: relu(xs[0]),
    "leaky_relu": lambda xs, a: leaky_relu(xs[0], a.get("slope", 0.2)),
    "linear": lambda xs, a: linear(*xs),
    "reduce_mean": lambda xs, a: reduce_mean(xs[0], a.get("axes")),
    "reduce_sum": lambda xs, a: reduce_sum(xs[0], a.get("axes")),
    "l1_norm": lambda xs, a: l1_norm(xs[0], a.get("axes")),
    "l2_norm": lambda xs, a: l2_norm(xs[0], a.get("axes")),
    "min_const": lambda xs, a: min_const(xs[0], a["value"]),
    "batchnorm_train": lambda xs, a: batchnorm_train(*xs, eps=a.get("eps", 1e-5), stats=a.get("stats")),
    "batchnorm_infer": lambda xs, a: batchnorm_infer(
        *xs, running_mean=a["running_mean"], running_var=a["running_var"], eps=a.get("eps", 1e-5)
    ),
    "bias_add": lambda xs, a: bias_add(*xs),
    "scale": lambda xs, a: scale(xs[0], a["factor"]),
    "pow": lambda xs, a: power(xs[0], a["exponent"]),
    "abs": lambda xs, a: absolute(xs[0]),
    "transpose": lambda xs, a: transpose(xs[0]),
    "reshape": lambda xs, a: reshape(xs[0], a["shape"]),
}


def apply_primitive(kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Dispatch one forward primitive by name"""
    try:
        op = _PUBLIC[kind]
    except KeyError:
        raise ConfigError(f"unknown primitive '{kind}'") from None
    return op([as_tensor(t) for t in inputs], attrs or {})


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _key(t: Tensor):
    return ("n", t.node.seq) if t.node is not None else ("l", id(t))


def _collect(root: TapeNode) -> List[TapeNode]:
    seen: Dict[int, TapeNode] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.seq in seen:
            continue
        seen[node.seq] = node
        stack.extend(t.node for t in node.inputs if t.node is not None)
    return [seen[s] for s in sorted(seen, reverse=True)]


def backward(loss: Tensor, wrt: Mapping[str, Tensor], create_graph: bool = False) -> Dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to every tensor in ``wrt``.

    Tensors the loss does not reach get zero gradients. With ``create_graph``
    the returned gradients are themselves recorded on the tape.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise EmptyTapeError("loss was not produced by any recorded operation")

    grads = {_key(loss): constant(np.ones_like(loss.data))}
    with grad_mode(create_graph):
        for node in _collect(loss.node):
            g = grads.get(("n", node.seq))
            if g is None:
                continue
            _, vjp = _ELEMENTARY[node.kind]
            for t, gi in zip(node.inputs, vjp(node, g)):
                if gi is None or not t.requires_grad:
                    continue
                k = _key(t)
                grads[k] = add(grads[k], gi) if k in grads else gi

    result = {}
    for name, t in wrt.items():
        g = grads.get(_key(t))
        result[name] = g if g is not None else constant(np.zeros(t.shape))
    return result


def clip_grad_norm(grads: Dict[str, Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``"""
    total = float(np.sqrt(sum(float(np.sum(g.data * g.data)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = constant(grads[name].data * factor)
    return total


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place"""
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError("adam", (name, p.shape, g.shape))
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ShapeMismatchError("adam", (name, p.shape, m.shape))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    checked: int
    tolerance: float
    total: int = 0
    failures: List[Tuple[str, Tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def complete(self) -> bool:
        return self.checked == self.total

    def to_dict(self) -> dict:
        return {
            "max_relative_error": self.max_relative_error,
            "checked": self.checked,
            "total": self.total,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "failures": [
                {"parameter": n, "index": list(i), "analytic": a, "numeric": f, "relative_error": r}
                for n, i, a, f, r in self.failures
            ],
        }


def finite_difference_check(network, inputs, tolerance: float = 1e-4, step: float = 1e-6,
                            max_entries: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic parameter gradients with central differences.

    ``network`` exposes ``parameters`` (name -> Tensor) and
    ``forward(inputs, mode)``; it is evaluated in inference mode with any
    spectral normalization frozen. Every entry of every parameter tensor is
    checked unless ``max_entries`` caps the entries drawn per tensor. An entry
    failing at ``step`` is evaluated again at ``step / 10`` (a ReLU kink inside
    the stencil) before it is reported.

    Relative errors use ``max(|analytic|, |numeric|, floor)`` as denominator,
    where ``floor`` is 1e-3 of the largest analytic gradient in the tensor.
    """
    if max_entries is not None and max_entries < 1:
        raise ConfigError(f"max_entries must be positive, got {max_entries}")
    rng = philox_rng(seed)
    frozen = getattr(network, "frozen_spectral", None)
    params = network.parameters
    total = int(sum(p.size for p in params.values()))
    with (frozen() if frozen else nullcontext()):
        out = network.forward(inputs, mode="infer")
        weights = rng.standard_normal(out.shape)
        if not params:
            return GradCheckReport(0.0, 0, tolerance)
        loss = reduce_sum(mul(out, constant(weights)))
        grads = backward(loss, params)

        def objective() -> float:
            with no_grad():
                return float(np.sum(network.forward(inputs, mode="infer").data * weights))

        def central(p: Tensor, idx, h: float) -> float:
            original = p.data[idx]
            p.data[idx] = original + h
            plus = objective()
            p.data[idx] = original - h
            minus = objective()
            p.data[idx] = original
            return (plus - minus) / (2.0 * h)

        report = GradCheckReport(0.0, 0, tolerance, total)
        for name in sorted(params):
            p = params[name]
            floor = max(1e-8, 1e-3 * float(np.max(np.abs(grads[name].data))))

            def relative(a: float, n: float) -> float:
                return abs(a - n) / max(abs(a), abs(n), floor)

            if max_entries is None or p.size <= max_entries:
                entries = np.arange(p.size)
            else:
                entries = np.sort(rng.choice(p.size, size=max_entries, replace=False))
            for flat in entries:
                idx = np.unravel_index(int(flat), p.shape)
                analytic = float(grads[name].data[idx])
                numeric = central(p, idx, step)
                error = relative(analytic, numeric)
                if error > tolerance:
                    retry = central(p, idx, step / 10.0)
                    if relative(analytic, retry) < error:
                        numeric, error = retry, relative(analytic, retry)
                report.checked += 1
                report.max_relative_error = max(report.max_relative_error, error)
                if error > tolerance:
                    report.failures.append((name, tuple(int(i) for i in idx), analytic, numeric, error))
    logger.debug("gradient check: %d of %d entries, max relative error %.3e", report.checked,
                 report.total, report.max_relative_error)
    return report
