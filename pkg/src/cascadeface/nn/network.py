"""Network descriptions, parameter init, and whole-network forward/backward."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..errors import DimensionError, NumericError, StateError
from . import functional as F

HEAD_WIDTHS = {"cls": 2, "reg": 4, "pts": 10}


@dataclass(frozen=True)
class Conv:
    name: str
    cin: int
    cout: int
    k: int
    stride: int = 1
    kind: str = "conv"


@dataclass(frozen=True)
class PReLU:
    name: str
    channels: int
    kind: str = "prelu"


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int
    kind: str = "pool"


@dataclass(frozen=True)
class Flatten:
    kind: str = "flatten"


@dataclass(frozen=True)
class Dense:
    name: str
    fin: int
    fout: int
    kind: str = "dense"


_KINDS = {"conv": Conv, "prelu": PReLU, "pool": MaxPool, "flatten": Flatten, "dense": Dense}


def layer_from_dict(d: dict):
    d = dict(d)
    return _KINDS[d.pop("kind")](**d)


def layer_to_dict(layer) -> dict:
    return dict(layer.__dict__)


@dataclass(frozen=True)
class NetworkSpec:
    """Trunk layers, three output heads, and an optional bridge input.

    When ``bridge_width > 0`` the first dense layer of the trunk receives
    ``bridge_width`` extra input features, weighted by ``<layer>.bridge_w``.
    """

    name: str
    input_size: int
    trunk: tuple
    heads: dict
    bridge_width: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def bridge_layer(self) -> Optional[str]:
        for layer in self.trunk:
            if layer.kind == "dense":
                return layer.name
        return None

    def with_bridge(self, width: int) -> "NetworkSpec":
        if width and self.bridge_layer is None:
            raise DimensionError(f"{self.name} has no dense layer to receive a bridge")
        return replace(self, bridge_width=int(width))

    def trunk_shape(self, size: Optional[int] = None) -> tuple:
        """Shape of the trunk output (without batch axis) for a square input."""
        shape = (3, size or self.input_size, size or self.input_size)
        for layer in self.trunk:
            shape = _out_shape(layer, shape)
        return shape

    @property
    def feature_width(self) -> int:
        return int(np.prod(self.trunk_shape()))

    def validate(self) -> None:
        shape = self.trunk_shape()
        for name, head in self.heads.items():
            if name not in HEAD_WIDTHS:
                raise DimensionError(f"unknown head {name}")
            _out_shape(head, shape)
            width = head.cout if head.kind == "conv" else head.fout
            if width != HEAD_WIDTHS[name]:
                raise DimensionError(f"head {name} must have width {HEAD_WIDTHS[name]}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_size": self.input_size,
            "trunk": [layer_to_dict(layer) for layer in self.trunk],
            "heads": {k: layer_to_dict(v) for k, v in self.heads.items()},
            "bridge_width": self.bridge_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            name=d["name"],
            input_size=d["input_size"],
            trunk=tuple(layer_from_dict(x) for x in d["trunk"]),
            heads={k: layer_from_dict(v) for k, v in d["heads"].items()},
            bridge_width=d.get("bridge_width", 0),
        )


def _out_shape(layer, shape):
    c, h, w = shape
    if layer.kind == "conv":
        if c != layer.cin:
            raise DimensionError(f"{layer.name}: expects {layer.cin} channels, got {c}")
        if h < layer.k or w < layer.k:
            raise DimensionError(f"{layer.name}: input {h}x{w} smaller than kernel")
        return (layer.cout, (h - layer.k) // layer.stride + 1, (w - layer.k) // layer.stride + 1)
    if layer.kind == "pool":
        if h < layer.window or w < layer.window:
            raise DimensionError(f"pool window {layer.window} larger than {h}x{w}")
        return (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
    if layer.kind == "prelu":
        if c != layer.channels:
            raise DimensionError(f"{layer.name}: expects {layer.channels} channels, got {c}")
        return shape
    if layer.kind == "flatten":
        return (c * h * w, 1, 1)
    if layer.kind == "dense":
        if c * h * w != layer.fin or (h, w) != (1, 1):
            raise DimensionError(f"{layer.name}: expects width {layer.fin}, got {shape}")
        return (layer.fout, 1, 1)
    raise DimensionError(f"unknown layer kind {layer.kind}")


def _heads(width_in, conv):
    if conv:
        return {name: Conv(name, width_in, w, 1) for name, w in HEAD_WIDTHS.items()}
    return {name: Dense(name, width_in, w) for name, w in HEAD_WIDTHS.items()}


def net12_spec() -> NetworkSpec:
    trunk = (
        Conv("conv1", 3, 10, 3), PReLU("prelu1", 10), MaxPool(2, 2),
        Conv("conv2", 10, 16, 3), PReLU("prelu2", 16),
        Conv("conv3", 16, 32, 3), PReLU("prelu3", 32),
    )
    return NetworkSpec("net12", 12, trunk, _heads(32, conv=True))


def net24_spec() -> NetworkSpec:
    trunk = (
        Conv("conv1", 3, 28, 3), PReLU("prelu1", 28), MaxPool(3, 2),
        Conv("conv2", 28, 48, 3), PReLU("prelu2", 48), MaxPool(3, 2),
        Conv("conv3", 48, 64, 2), PReLU("prelu3", 64),
        Flatten(), Dense("fc", 64 * 2 * 2, 128), PReLU("prelu4", 128),
    )
    return NetworkSpec("net24", 24, trunk, _heads(128, conv=False))


def net48_spec() -> NetworkSpec:
    trunk = (
        Conv("conv1", 3, 32, 3), PReLU("prelu1", 32), MaxPool(3, 2),
        Conv("conv2", 32, 64, 3), PReLU("prelu2", 64), MaxPool(3, 2),
        Conv("conv3", 64, 64, 3), PReLU("prelu3", 64), MaxPool(2, 2),
        Conv("conv4", 64, 128, 2), PReLU("prelu4", 128),
        Flatten(), Dense("fc", 128 * 2 * 2, 256), PReLU("prelu5", 256),
    )
    return NetworkSpec("net48", 48, trunk, _heads(256, conv=False))


SPEC_BUILDERS = {"net12": net12_spec, "net24": net24_spec, "net48": net48_spec}


def param_shapes(spec: NetworkSpec) -> dict:
    """Ordered mapping of parameter name to shape."""
    shapes = {}
    for layer in list(spec.trunk) + list(spec.heads.values()):
        if layer.kind == "conv":
            shapes[f"{layer.name}.w"] = (layer.cout, layer.cin, layer.k, layer.k)
            shapes[f"{layer.name}.b"] = (layer.cout,)
        elif layer.kind == "dense":
            shapes[f"{layer.name}.w"] = (layer.fout, layer.fin)
            shapes[f"{layer.name}.b"] = (layer.fout,)
            if spec.bridge_width and layer.name == spec.bridge_layer:
                shapes[f"{layer.name}.bridge_w"] = (layer.fout, spec.bridge_width)
        elif layer.kind == "prelu":
            shapes[f"{layer.name}.a"] = (layer.channels,)
    return shapes


def init_params(spec: NetworkSpec, rng=None, dtype=np.float32) -> dict:
    """Glorot-uniform weights, zero biases, PReLU slopes 0.25, zero bridge weights."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b") or name.endswith(".bridge_w"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".a"):
            params[name] = np.full(shape, 0.25, dtype=dtype)
        else:
            receptive = int(np.prod(shape[2:])) if len(shape) == 4 else 1
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


@dataclass
class ForwardCache:
    records: list = field(default_factory=list)
    trunk_shape: tuple = ()
    head_records: dict = field(default_factory=dict)
    head_map_shape: tuple = ()
    squeezed: bool = True
    bridge_input: Optional[np.ndarray] = None
    bridge_record: Optional[np.ndarray] = None


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


def forward(spec: NetworkSpec, params: dict, x: np.ndarray, bridge=None, keep_maps=False):
    """Run the trunk and all heads on an ``(N, 3, H, W)`` batch. Returns ``(heads, cache)``.

    ``heads`` holds ``cls_logits``, ``cls`` (softmax probabilities), ``reg``,
    ``pts`` and ``features`` (flattened trunk output). Heads are ``(N, K)``
    when the trunk output is 1x1 spatially, ``(N, K, H', W')`` otherwise or
    when ``keep_maps`` is set.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected (N,3,H,W) input, got {x.shape}")
    if spec.bridge_width and bridge is not None:
        bridge = np.asarray(bridge)
        if bridge.shape != (x.shape[0], spec.bridge_width):
            raise DimensionError(
                f"bridge input {bridge.shape} != ({x.shape[0]}, {spec.bridge_width})")
    elif bridge is not None:
        raise DimensionError(f"{spec.name} was built without a bridge input")

    cache = ForwardCache(bridge_input=bridge)
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for layer in spec.trunk:
        kind = layer.kind
        if kind == "conv":
            out, cols = F.conv2d_forward(h, params[f"{layer.name}.w"], params[f"{layer.name}.b"],
                                         layer.stride)
            cache.records.append((h.shape, cols))
        elif kind == "prelu":
            out = F.prelu_forward(h, params[f"{layer.name}.a"])
            cache.records.append(h)
        elif kind == "pool":
            out, index = F.maxpool_forward(h, layer.window, layer.stride)
            cache.records.append((h.shape, index))
        elif kind == "flatten":
            out = h.reshape(h.shape[0], -1)
            cache.records.append(h.shape)
        else:
            if h.ndim != 2:
                raise DimensionError(f"{layer.name}: dense layer needs flattened input")
            out = F.dense_forward(h, params[f"{layer.name}.w"], params[f"{layer.name}.b"])
            if bridge is not None and layer.name == spec.bridge_layer:
                # separate product: an all-zero bridge weight leaves ``out`` bit-identical
                out = out + bridge @ params[f"{layer.name}.bridge_w"].T
            cache.records.append(h)
        h = out
    cache.trunk_shape = h.shape
    conv_heads = h.ndim == 4
    results = {}
    for name, head in spec.heads.items():
        if head.kind == "conv":
            out, cols = F.conv2d_forward(h, params[f"{name}.w"], params[f"{name}.b"], head.stride)
            cache.head_records[name] = cols
            out = out.transpose(0, 3, 1, 2)
        else:
            out = F.dense_forward(h, params[f"{name}.w"], params[f"{name}.b"])
            cache.head_records[name] = h
        results[name] = out
    if conv_heads:
        cache.head_map_shape = results["cls"].shape[2:]
    if conv_heads and not keep_maps and cache.head_map_shape == (1, 1):
        results = {k: v[:, :, 0, 0] for k, v in results.items()}
    results["cls_logits"] = results.pop("cls")
    results["cls"] = F.softmax2_forward(np.moveaxis(results["cls_logits"], 1, -1))
    results["cls"] = np.moveaxis(results["cls"], -1, 1)
    results["features"] = h.reshape(h.shape[0], -1)
    for k in ("cls_logits", "reg", "pts"):
        _check_finite(results[k], f"{spec.name}.{k}")
    if single:
        results = {k: v[0] for k, v in results.items()}
    return results, cache


def backward(spec: NetworkSpec, params: dict, cache: Optional[ForwardCache], head_grads: dict,
             feature_grad=None, grads: Optional[dict] = None):
    """Reverse pass. Returns ``(grads, bridge_grad)``.

    ``head_grads`` maps ``cls`` (gradient w.r.t. the pre-softmax logits),
    ``reg`` and ``pts`` to arrays shaped like the forward heads; missing keys
    count as zero. ``feature_grad`` adds a gradient at the flattened trunk
    output (used when this net feeds a bridge). Gradients are accumulated
    into ``grads`` when given.
    """
    if cache is None or not cache.records:
        raise StateError("backward called without a cached forward pass")
    if grads is None:
        grads = {name: np.zeros_like(p) for name, p in params.items()}
    dtype = next(iter(params.values())).dtype
    tshape = cache.trunk_shape
    dh = np.zeros(tshape, dtype=dtype)
    for name, head in spec.heads.items():
        g = head_grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=dtype)
        if head.kind == "conv":
            if g.ndim == 1:
                g = g[None]
            if g.ndim == 2:
                g = g[:, :, None, None]
            g = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            dx, dw, db = F.conv2d_backward(g, tshape, cache.head_records[name], params[f"{name}.w"],
                                           head.stride)
        else:
            if g.ndim == 1:
                g = g[None]
            dx, dw, db = F.dense_backward(g, cache.head_records[name], params[f"{name}.w"])
        grads[f"{name}.w"] += dw
        grads[f"{name}.b"] += db
        dh += dx
    if feature_grad is not None:
        dh += np.asarray(feature_grad, dtype=dtype).reshape(tshape)

    bridge_grad = None
    first = spec.trunk[0]
    for layer, rec in zip(reversed(spec.trunk), reversed(cache.records)):
        kind = layer.kind
        if kind == "conv":
            x_shape, cols = rec
            dh, dw, db = F.conv2d_backward(dh, x_shape, cols, params[f"{layer.name}.w"],
                                           layer.stride, need_dx=layer is not first)
            grads[f"{layer.name}.w"] += dw
            grads[f"{layer.name}.b"] += db
        elif kind == "prelu":
            dh, da = F.prelu_backward(dh, rec, params[f"{layer.name}.a"])
            grads[f"{layer.name}.a"] += da
        elif kind == "pool":
            x_shape, index = rec
            dh = F.maxpool_backward(dh, x_shape, index)
        elif kind == "flatten":
            dh = dh.reshape(rec)
        else:
            if cache.bridge_input is not None and layer.name == spec.bridge_layer:
                bw = params[f"{layer.name}.bridge_w"]
                grads[f"{layer.name}.bridge_w"] += dh.T @ cache.bridge_input
                bridge_grad = dh @ bw
            dh, dw, db = F.dense_backward(dh, rec, params[f"{layer.name}.w"])
            grads[f"{layer.name}.w"] += dw
            grads[f"{layer.name}.b"] += db
    for name, g in grads.items():
        _check_finite(g, f"gradient {name}")
    return grads, bridge_grad


def sgd_step(params: dict, grads: dict, learning_rate: float) -> dict:
    """In-place ``p <- p - lr * g``; the gradient buffers are cleared afterwards."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise StateError(f"missing gradient buffers: {missing}")
    for name, p in params.items():
        p -= np.asarray(learning_rate * grads[name], dtype=p.dtype)
    grads.clear()
    return params


class Network:
    """A spec plus its parameters and gradient buffers."""

    def __init__(self, spec: NetworkSpec, params: Optional[dict] = None, rng=None,
                 dtype=np.float32):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, rng, dtype)
        self.grads = None
        self._cache = None

    @classmethod
    def build(cls, name: str, rng=None, dtype=np.float32) -> "Network":
        return cls(SPEC_BUILDERS[name](), rng=rng, dtype=dtype)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, x, bridge=None, keep_maps=False, train=True):
        heads, cache = forward(self.spec, self.params, np.asarray(x, dtype=self.dtype),
                               bridge=bridge, keep_maps=keep_maps)
        self._cache = cache if train else None
        return heads

    def predict(self, x, bridge=None, keep_maps=False):
        return self.forward(x, bridge=bridge, keep_maps=keep_maps, train=False)

    def backward(self, head_grads, feature_grad=None):
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        if self.grads is None:
            self.zero_grad()
        _, bridge_grad = backward(self.spec, self.params, self._cache, head_grads,
                                  feature_grad=feature_grad, grads=self.grads)
        return bridge_grad

    def zero_grad(self):
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def step(self, learning_rate: float):
        if self.grads is None:
            raise StateError("sgd step without gradients")
        sgd_step(self.params, self.grads, learning_rate)
        self.grads = None
        self._cache = None

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})

    def with_bridge(self, width: int) -> "Network":
        """Copy of this net with a zero-initialised bridge input of ``width``."""
        spec = self.spec.with_bridge(width)
        params = {k: v.copy() for k, v in self.params.items() if not k.endswith(".bridge_w")}
        if width:
            layer = spec.bridge_layer
            fout = self.params[f"{layer}.w"].shape[0]
            params[f"{layer}.bridge_w"] = np.zeros((fout, width), dtype=self.dtype)
        ordered = {name: params[name] for name in param_shapes(spec)}
        return Network(spec, ordered)

    def astype(self, dtype) -> "Network":
        return Network(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())
