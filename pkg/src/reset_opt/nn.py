"""Small numpy networks with hand-written reverse-mode gradients.

Arrays are float64 ``numpy.ndarray`` throughout. All trainable values of a
network live in one flat vector owned by :class:`ParamSet`; the per-layer
tensors are reshaped views into it, so flattening and assigning are plain
copies and an SGD step is a single vector update.

Supported layers: Linear, Conv2d, MaxPool2d, ReLU, BatchNorm, Dropout,
Flatten and a final Softmax. Losses: cross-entropy and the robust mean
absolute error ``sum_i |p_i - y_i|`` on softmax outputs (``= 2 (1 - p_y)``).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FORMER = "former"
LATTER = "latter"
SECTIONS = (FORMER, LATTER)

CROSS_ENTROPY = "ce"
MAE = "mae"
LOSSES = (CROSS_ENTROPY, MAE)


class DimensionError(ValueError):
    """Shapes or vector lengths do not line up."""


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    pad: int = 0
    stride: int = 1


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    pad: int = 0
    stride: Optional[int] = None

    @property
    def step(self) -> int:
        return self.kernel if self.stride is None else self.stride


@dataclass(frozen=True)
class BatchNorm:
    features: int
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Linear, Conv2d, MaxPool2d, BatchNorm, Dropout, ReLU, Flatten, Softmax]

_KEYWORDS = {
    "linear": Linear,
    "conv2d": Conv2d,
    "maxpool2d": MaxPool2d,
    "batchnorm": BatchNorm,
    "dropout": Dropout,
    "relu": ReLU,
    "flatten": Flatten,
    "softmax": Softmax,
}
_NAMES = {cls: name for name, cls in _KEYWORDS.items()}


def _layer_to_text(layer: Layer) -> str:
    name = _NAMES[type(layer)]
    values = [getattr(layer, f) for f in layer.__dataclass_fields__]
    return " ".join([name] + [repr(v) for v in values if v is not None])


def _layer_from_text(text: str) -> Layer:
    parts = text.split()
    if not parts or parts[0].lower() not in _KEYWORDS:
        raise ValueError(f"unknown layer {text!r}")
    cls = _KEYWORDS[parts[0].lower()]
    names = list(cls.__dataclass_fields__)
    if len(parts) - 1 > len(names):
        raise ValueError(f"too many arguments for {parts[0]}: {text!r}")
    kwargs = {}
    for fname, raw in zip(names, parts[1:]):
        kind = cls.__dataclass_fields__[fname].type
        kwargs[fname] = float(raw) if "float" in str(kind) else int(raw)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"bad layer {text!r}: {exc}") from None


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus input shape and a section tag per layer.

    ``sections[i]`` tags the parameters of layer ``i`` as ``former`` or
    ``latter`` (used by partial resetting). Shape compatibility is checked
    on construction.
    """

    layers: tuple
    input_shape: tuple
    sections: tuple = ()

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not layers or not isinstance(layers[-1], Softmax):
            raise DimensionError("the last layer must be Softmax")
        if any(isinstance(layer, Softmax) for layer in layers[:-1]):
            raise DimensionError("Softmax is only allowed as the output layer")
        sections = tuple(self.sections) if self.sections else default_sections(layers)
        if len(sections) != len(layers) or any(s not in SECTIONS for s in sections):
            raise ValueError("sections must tag every layer with 'former' or 'latter'")
        object.__setattr__(self, "sections", sections)
        self.shapes()

    def shapes(self) -> list:
        """Per-layer output shapes (excluding the batch axis)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    @property
    def has_batchnorm(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    def to_text(self) -> str:
        lines = ["input " + " ".join(str(s) for s in self.input_shape)]
        for layer, section in zip(self.layers, self.sections):
            lines.append(f"{_layer_to_text(layer)} @{section}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines or not lines[0].startswith("input"):
            raise ValueError("network text must start with an 'input' line")
        input_shape = tuple(int(v) for v in lines[0].split()[1:])
        layers, sections = [], []
        for ln in lines[1:]:
            m = re.match(r"^(.*?)\s*(?:@(\w+))?$", ln)
            layers.append(_layer_from_text(m.group(1)))
            sections.append(m.group(2))
        if all(s is None for s in sections):
            return cls(tuple(layers), input_shape)
        if any(s is None for s in sections):
            raise ValueError("either tag every layer with @section or none")
        return cls(tuple(layers), input_shape, tuple(sections))


def default_sections(layers: Sequence[Layer]) -> tuple:
    """Convolutional part is ``former`` and the linear head ``latter``.

    Networks without convolutions keep everything but the output layer in
    ``former``.
    """
    n = len(layers)
    has_conv = any(isinstance(layer, (Conv2d, MaxPool2d)) for layer in layers)
    linear_idx = [i for i, layer in enumerate(layers) if isinstance(layer, Linear)]
    if has_conv:
        last_conv = max(i for i, layer in enumerate(layers) if isinstance(layer, (Conv2d, MaxPool2d)))
        start = next((i for i in linear_idx if i > last_conv), n)
    else:
        start = linear_idx[-1] if linear_idx else n
    return tuple(FORMER if i < start else LATTER for i in range(n))


def _out_shape(layer: Layer, shape: tuple, idx: int) -> tuple:
    def fail(msg):
        raise DimensionError(f"layer {idx} ({type(layer).__name__}): {msg}, got input {shape}")

    if isinstance(layer, Linear):
        if len(shape) != 1 or shape[0] != layer.in_features:
            fail(f"expects ({layer.in_features},)")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            fail(f"expects ({layer.in_channels}, H, W)")
        h, w = (_conv_len(s, layer.kernel, layer.pad, layer.stride) for s in shape[1:])
        if h < 1 or w < 1:
            fail("kernel larger than padded input")
        return (layer.out_channels, h, w)
    if isinstance(layer, MaxPool2d):
        if len(shape) != 3:
            fail("expects (C, H, W)")
        h, w = (_conv_len(s, layer.kernel, layer.pad, layer.step) for s in shape[1:])
        if h < 1 or w < 1:
            fail("kernel larger than padded input")
        return (shape[0], h, w)
    if isinstance(layer, BatchNorm):
        if len(shape) not in (1, 3) or shape[0] != layer.features:
            fail(f"expects {layer.features} features/channels")
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Softmax):
        if len(shape) != 1:
            fail("expects a flat vector of logits")
        return shape
    return shape


def _conv_len(size: int, kernel: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# presets


def fcn(input_shape=(3, 32, 32), hidden: int = 50, num_classes: int = 10,
        batch_norm: bool = True) -> NetworkSpec:
    """Three-layer fully connected net; BN sits before each hidden ReLU."""
    input_shape = tuple(np.atleast_1d(input_shape))
    layers = [] if len(input_shape) == 1 else [Flatten()]
    width = int(np.prod(input_shape))
    for _ in range(2):
        layers.append(Linear(width, hidden))
        if batch_norm:
            layers.append(BatchNorm(hidden))
        layers.append(ReLU())
        width = hidden
    layers += [Linear(width, num_classes), Softmax()]
    return NetworkSpec(tuple(layers), input_shape)


def small_cnn(num_classes: int = 10, batch_norm: bool = True,
              input_shape=(3, 32, 32)) -> NetworkSpec:
    """Two 8-channel convolutions, one pool, dropout and a linear head."""
    c, h, w = input_shape
    layers = []
    for cin in (c, 8):
        layers.append(Conv2d(cin, 8, 3, 1, 1))
        if batch_norm:
            layers.append(BatchNorm(8))
        layers.append(ReLU())
    layers += [MaxPool2d(2, 0, 2), Dropout(0.2), Flatten(),
               Linear(8 * (h // 2) * (w // 2), num_classes), Softmax()]
    return NetworkSpec(tuple(layers), tuple(input_shape))


def vcnn(num_classes: int = 10, input_shape=(3, 32, 32)) -> NetworkSpec:
    """The vanilla CNN: three conv blocks, dropout, three linear layers.

    Normalization placement follows the architecture table literally, which
    includes a BatchNorm right after the first max-pool.
    """
    c, h, w = input_shape
    layers = []
    width = c
    for block, channels in enumerate((32, 64, 128, 128, 256, 256)):
        layers += [Conv2d(width, channels, 3, 1, 1), BatchNorm(channels), ReLU()]
        width = channels
        if block % 2 == 1:
            layers.append(MaxPool2d(2, 0, 2))
            if block == 1:
                layers.append(BatchNorm(channels))
    flat = 256 * (h // 8) * (w // 8)
    layers += [Dropout(0.2), Flatten(),
               Linear(flat, 1024), BatchNorm(1024), ReLU(),
               Linear(1024, 512), BatchNorm(512), ReLU(),
               Linear(512, num_classes), Softmax()]
    return NetworkSpec(tuple(layers), tuple(input_shape))


PRESETS = {"fcn": fcn, "small_cnn": small_cnn, "vcnn": vcnn}


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamEntry:
    name: str
    shape: tuple
    section: str
    offset: int
    size: int = field(init=False)

    def __post_init__(self):
        self.size = int(np.prod(self.shape, dtype=np.int64))


@dataclass
class ParamSet:
    """Named, section-tagged parameter tensors backed by one flat vector.

    ``buffers`` hold non-trainable state (batch-norm running statistics);
    they are not part of :meth:`flatten`.
    """

    entries: list
    vector: np.ndarray
    buffers: dict = field(default_factory=dict)
    buffer_sections: dict = field(default_factory=dict)

    @property
    def total_dim(self) -> int:
        return int(self.vector.size)

    def __getitem__(self, name: str) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return self.vector[e.offset:e.offset + e.size].reshape(e.shape)
        return self.buffers[name]

    def views(self, flat: Optional[np.ndarray] = None) -> dict:
        flat = self.vector if flat is None else flat
        return {e.name: flat[e.offset:e.offset + e.size].reshape(e.shape) for e in self.entries}

    def names(self) -> list:
        return [e.name for e in self.entries]

    def flatten(self) -> np.ndarray:
        return self.vector.copy()

    def copy(self) -> "ParamSet":
        return ParamSet(list(self.entries), self.vector.copy(),
                        {k: v.copy() for k, v in self.buffers.items()},
                        dict(self.buffer_sections))

    def section_mask(self, sections: Optional[Iterable[str]] = None) -> np.ndarray:
        """Boolean vector selecting the coordinates of the given sections."""
        if sections is None:
            return np.ones(self.total_dim, dtype=bool)
        sections = set(sections)
        unknown = sections - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown sections {sorted(unknown)}")
        mask = np.zeros(self.total_dim, dtype=bool)
        for e in self.entries:
            if e.section in sections:
                mask[e.offset:e.offset + e.size] = True
        return mask

    def assign_(self, flat: np.ndarray, sections: Optional[Iterable[str]] = None) -> "ParamSet":
        """In-place version of :func:`assign`."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_dim,):
            raise DimensionError(f"expected a vector of length {self.total_dim}, got {flat.shape}")
        if sections is None:
            self.vector[:] = flat
        else:
            mask = self.section_mask(sections)
            self.vector[mask] = flat[mask]
        return self

    def get_buffers(self) -> dict:
        return {k: v.copy() for k, v in self.buffers.items()}

    def set_buffers(self, buffers: dict, sections: Optional[Iterable[str]] = None) -> None:
        sections = set(SECTIONS if sections is None else sections)
        for k, v in buffers.items():
            if self.buffer_sections.get(k, FORMER) in sections:
                self.buffers[k][...] = v


def flatten(params: ParamSet) -> np.ndarray:
    return params.flatten()


def assign(params: ParamSet, flat: np.ndarray, sections: Optional[Iterable[str]] = None) -> ParamSet:
    """Return a copy of ``params`` with coordinates taken from ``flat``.

    With ``sections`` given, only entries tagged with one of them are
    overwritten; an empty collection leaves everything unchanged.
    """
    return params.copy().assign_(flat, sections)


def _param_shapes(net: NetworkSpec) -> list:
    """(name, shape, section, init-kind, fan_in) for every trainable tensor."""
    out = []
    for i, (layer, section) in enumerate(zip(net.layers, net.sections)):
        if isinstance(layer, Linear):
            fan = layer.in_features
            out.append((f"{i}.weight", (layer.in_features, layer.out_features), section, "he", fan))
            out.append((f"{i}.bias", (layer.out_features,), section, "bias", fan))
        elif isinstance(layer, Conv2d):
            fan = layer.in_channels * layer.kernel ** 2
            out.append((f"{i}.weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                        section, "he", fan))
            out.append((f"{i}.bias", (layer.out_channels,), section, "bias", fan))
        elif isinstance(layer, BatchNorm):
            out.append((f"{i}.gamma", (layer.features,), section, "one", 0))
            out.append((f"{i}.beta", (layer.features,), section, "zero", 0))
    return out


def init_params(net: NetworkSpec, seed: Union[int, np.random.Generator, None] = 0) -> ParamSet:
    """He-uniform weights ``U(+-sqrt(6/fan_in))``, biases ``U(+-1/sqrt(fan_in))``."""
    rng = np.random.default_rng(seed)
    specs = _param_shapes(net)
    entries, offset = [], 0
    for name, shape, section, _, _ in specs:
        entries.append(ParamEntry(name, tuple(shape), section, offset))
        offset += entries[-1].size
    vector = np.zeros(offset)
    params = ParamSet(entries, vector)
    views = params.views()
    for name, shape, _, kind, fan in specs:
        if kind == "he":
            bound = np.sqrt(6.0 / fan)
            views[name][...] = rng.uniform(-bound, bound, size=shape)
        elif kind == "bias":
            bound = 1.0 / np.sqrt(fan)
            views[name][...] = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            views[name][...] = 1.0
    for i, (layer, section) in enumerate(zip(net.layers, net.sections)):
        if isinstance(layer, BatchNorm):
            params.buffers[f"{i}.running_mean"] = np.zeros(layer.features)
            params.buffers[f"{i}.running_var"] = np.ones(layer.features)
            params.buffer_sections[f"{i}.running_mean"] = section
            params.buffer_sections[f"{i}.running_var"] = section
    return params


def check_params(net: NetworkSpec, params: ParamSet) -> None:
    expected = [(name, tuple(shape)) for name, shape, *_ in _param_shapes(net)]
    got = [(e.name, tuple(e.shape)) for e in params.entries]
    if expected != got:
        raise DimensionError("parameter set does not match the network spec")


# ---------------------------------------------------------------------------
# forward / backward


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _bn_axes(x: np.ndarray) -> tuple:
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_shape(x: np.ndarray) -> tuple:
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


class _Pass:
    """Per-forward context: mode, dropout stream and the layer caches."""

    def __init__(self, train: bool, rng: Optional[np.random.Generator], update_stats: bool):
        self.train = train
        self.rng = rng
        self.update_stats = update_stats
        self.caches = []


def _forward_layer(i, layer, pv, bufs, x, ctx: _Pass):
    if isinstance(layer, Linear):
        w, b = pv[f"{i}.weight"], pv[f"{i}.bias"]
        return x @ w + b, x
    if isinstance(layer, Conv2d):
        xp = _pad(x, layer.pad)
        cols = _windows(xp, layer.kernel, layer.stride)
        w, b = pv[f"{i}.weight"], pv[f"{i}.bias"]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return out + b.reshape(1, -1, 1, 1), (xp.shape, cols)
    if isinstance(layer, MaxPool2d):
        xp = _pad(x, layer.pad, -np.inf)
        win = _windows(xp, layer.kernel, layer.step)
        flat = win.reshape(win.shape[:4] + (-1,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (xp.shape, arg)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), x > 0
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, Dropout):
        if not ctx.train or layer.p == 0:
            return x, None
        if ctx.rng is None:
            raise ValueError("train-mode dropout needs a dropout seed")
        keep = (ctx.rng.random(x.shape) >= layer.p) / (1.0 - layer.p)
        return x * keep, keep
    if isinstance(layer, BatchNorm):
        gamma, beta = pv[f"{i}.gamma"], pv[f"{i}.beta"]
        rm, rv = bufs[f"{i}.running_mean"], bufs[f"{i}.running_var"]
        axes, shp = _bn_axes(x), _bn_shape(x)
        if ctx.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if ctx.update_stats:
                count = x.size // x.shape[1]
                unbiased = var * count / max(count - 1, 1)
                rm *= 1.0 - layer.momentum
                rm += layer.momentum * mean
                rv *= 1.0 - layer.momentum
                rv += layer.momentum * unbiased
        else:
            mean, var = rm, rv
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = (x - mean.reshape(shp)) * inv.reshape(shp)
        return gamma.reshape(shp) * xhat + beta.reshape(shp), (xhat, inv, ctx.train)
    raise TypeError(f"unsupported layer {layer!r}")


def _reduce(g: np.ndarray, per_sample: bool, axes: tuple) -> np.ndarray:
    """Sum a per-sample contribution over ``axes``; keep axis 0 if per_sample."""
    if per_sample:
        axes = tuple(a for a in axes if a != 0)
    return g.sum(axis=axes) if axes else g


def _backward_layer(i, layer, pv, cache, dout, gv, per_sample):
    """Propagate ``dout`` through one layer, accumulating parameter grads."""
    if isinstance(layer, Linear):
        x = cache
        if per_sample:
            gv[f"{i}.weight"] += x[:, :, None] * dout[:, None, :]
            gv[f"{i}.bias"] += dout
        else:
            gv[f"{i}.weight"] += x.T @ dout
            gv[f"{i}.bias"] += dout.sum(axis=0)
        return dout @ pv[f"{i}.weight"].T
    if isinstance(layer, Conv2d):
        xshape, cols = cache
        w = pv[f"{i}.weight"]
        if per_sample:
            gv[f"{i}.weight"] += np.einsum("nchwij,nohw->nocij", cols, dout, optimize=True)
            gv[f"{i}.bias"] += dout.sum(axis=(2, 3))
        else:
            gv[f"{i}.weight"] += np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
            gv[f"{i}.bias"] += dout.sum(axis=(0, 2, 3))
        dxp = np.zeros(xshape)
        k, s = layer.kernel, layer.stride
        ho, wo = dout.shape[2:]
        for a in range(k):
            for b in range(k):
                contrib = np.tensordot(dout, w[:, :, a, b], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += contrib
        p = layer.pad
        return dxp[:, :, p:xshape[2] - p, p:xshape[3] - p] if p else dxp
    if isinstance(layer, MaxPool2d):
        xshape, arg = cache
        dxp = np.zeros(xshape)
        k, s = layer.kernel, layer.step
        ho, wo = dout.shape[2:]
        for a in range(k):
            for b in range(k):
                hit = dout * (arg == a * k + b)
                dxp[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += hit
        p = layer.pad
        return dxp[:, :, p:xshape[2] - p, p:xshape[3] - p] if p else dxp
    if isinstance(layer, ReLU):
        return dout * cache
    if isinstance(layer, Flatten):
        return dout.reshape(cache)
    if isinstance(layer, Dropout):
        return dout if cache is None else dout * cache
    if isinstance(layer, BatchNorm):
        xhat, inv, train = cache
        gamma = pv[f"{i}.gamma"]
        axes, shp = _bn_axes(dout), _bn_shape(dout)
        gv[f"{i}.gamma"] += _reduce(dout * xhat, per_sample, axes)
        gv[f"{i}.beta"] += _reduce(dout, per_sample, axes)
        dxhat = dout * gamma.reshape(shp)
        if not train:
            return dxhat * inv.reshape(shp)
        m = dout.size // dout.shape[1]
        mean_d = dxhat.sum(axis=axes, keepdims=True) / m
        mean_dx = (dxhat * xhat).sum(axis=axes, keepdims=True) / m
        return (dxhat - mean_d - xhat * mean_dx) * inv.reshape(shp)
    raise TypeError(f"unsupported layer {layer!r}")


def _as_batch(net: NetworkSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != net.input_shape:
        if X.ndim == 2 and X.shape[1] == int(np.prod(net.input_shape)):
            X = X.reshape((X.shape[0],) + net.input_shape)
        else:
            raise DimensionError(f"batch shape {X.shape} does not match input {net.input_shape}")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite values in the input batch")
    return X


def _rng(seed) -> Optional[np.random.Generator]:
    if seed is None or isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _logits(net, params, X, train, dropout_seed, update_stats):
    X = _as_batch(net, X)
    ctx = _Pass(train, _rng(dropout_seed), update_stats)
    pv = params.views()
    h = X
    for i, layer in enumerate(net.layers[:-1]):
        h, cache = _forward_layer(i, layer, pv, params.buffers, h, ctx)
        ctx.caches.append(cache)
    return h, ctx


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(net: NetworkSpec, params: ParamSet, X, mode: str = "eval",
            dropout_seed=None, update_stats: bool = False) -> np.ndarray:
    """Class probabilities for a batch.

    ``mode="train"`` uses batch statistics and (seeded) dropout; running
    statistics are only updated when ``update_stats`` is set.
    """
    logits, _ = _logits(net, params, X, mode == "train", dropout_seed, update_stats)
    return softmax(logits)


def _check_labels(net, y, n) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= net.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    return y.astype(np.int64)


def per_sample_losses(net, logits, y, loss) -> tuple:
    """Per-sample loss values and d(loss_i)/d(logits_i)."""
    n = logits.shape[0]
    rows = np.arange(n)
    if loss == CROSS_ENTROPY:
        logp = log_softmax(logits)
        p = np.exp(logp)
        d = p.copy()
        d[rows, y] -= 1.0
        return -logp[rows, y], d
    if loss == MAE:
        p = softmax(logits)
        py = p[rows, y]
        # d/dz_j of 2(1 - p_y) = -2 p_y (1[j=y] - p_j)
        d = 2.0 * py[:, None] * p
        d[rows, y] -= 2.0 * py
        return 2.0 * (1.0 - py), d
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def _backward(net, params, ctx, dlogits, per_sample):
    n = dlogits.shape[0]
    if per_sample:
        G = np.zeros((n, params.total_dim))
        gv = {e.name: G[:, e.offset:e.offset + e.size].reshape((n,) + e.shape) for e in params.entries}
    else:
        G = np.zeros(params.total_dim)
        gv = params.views(G)
    pv = params.views()
    d = dlogits
    for i in range(len(net.layers) - 2, -1, -1):
        d = _backward_layer(i, net.layers[i], pv, ctx.caches[i], d, gv, per_sample)
    return G


def loss_and_grad(net: NetworkSpec, params: ParamSet, X, y, loss: str = CROSS_ENTROPY,
                  mode: str = "train", dropout_seed=None, update_stats: bool = False) -> tuple:
    """Mean per-sample loss and its gradient as a flat vector."""
    logits, ctx = _logits(net, params, X, mode == "train", dropout_seed, update_stats)
    y = _check_labels(net, y, logits.shape[0])
    values, d = per_sample_losses(net, logits, y, loss)
    grad = _backward(net, params, ctx, d / len(y), per_sample=False)
    return float(values.mean()), grad


def _coupled(net: NetworkSpec, mode: str) -> bool:
    return mode == "train" and net.has_batchnorm


def per_sample_grads(net: NetworkSpec, params: ParamSet, X, y, loss: str = CROSS_ENTROPY,
                     mode: str = "train", dropout_seed=None) -> np.ndarray:
    """Gradient of each sample's loss, shape ``(n, total_dim)``.

    All samples share one forward pass, so in train mode with batch norm
    each row is the gradient of that sample's loss through the shared batch
    statistics, and the row mean equals :func:`loss_and_grad`'s gradient.
    """
    logits, ctx = _logits(net, params, X, mode == "train", dropout_seed, False)
    y = _check_labels(net, y, logits.shape[0])
    _, d = per_sample_losses(net, logits, y, loss)
    if not _coupled(net, mode):
        return _backward(net, params, ctx, d, per_sample=True)
    out = np.empty((len(y), params.total_dim))
    for k in range(len(y)):
        dk = np.zeros_like(d)
        dk[k] = d[k]
        out[k] = _backward(net, params, ctx, dk, per_sample=False)
    return out


def group_grads(net: NetworkSpec, params: ParamSet, X, y, groups, loss: str = CROSS_ENTROPY,
                mode: str = "train", dropout_seed=None) -> np.ndarray:
    """Gradients of ``sum(loss_i for i in group) / n`` for each boolean mask.

    One shared forward pass, so the rows add up to the :func:`loss_and_grad`
    gradient when the groups partition the batch, batch norm included.
    """
    logits, ctx = _logits(net, params, X, mode == "train", dropout_seed, False)
    y = _check_labels(net, y, logits.shape[0])
    _, d = per_sample_losses(net, logits, y, loss)
    out = []
    for g in groups:
        g = np.asarray(g, dtype=bool)
        if g.shape != (len(y),):
            raise DimensionError(f"group mask must have shape ({len(y)},)")
        dk = np.where(g[:, None], d, 0.0) / len(y)
        out.append(_backward(net, params, ctx, dk, per_sample=False))
    return np.array(out)


def evaluate(net: NetworkSpec, params: ParamSet, X, y, loss: str = CROSS_ENTROPY,
             chunk: int = 4096) -> tuple:
    """Eval-mode mean loss and accuracy over a dataset (chunked)."""
    X = np.asarray(X)
    y = np.asarray(y)
    total, correct = 0.0, 0
    for start in range(0, len(y), chunk):
        logits, _ = _logits(net, params, X[start:start + chunk], False, None, False)
        yc = _check_labels(net, y[start:start + chunk], logits.shape[0])
        values, _ = per_sample_losses(net, logits, yc, loss)
        total += values.sum()
        correct += int((logits.argmax(axis=1) == yc).sum())
    return total / len(y), correct / len(y)


def predict(net: NetworkSpec, params: ParamSet, X, chunk: int = 4096) -> np.ndarray:
    X = np.asarray(X)
    out = [forward(net, params, X[s:s + chunk]).argmax(axis=1) for s in range(0, len(X), chunk)]
    return np.concatenate(out)


def finite_diff_check(net: NetworkSpec, params: ParamSet, X, y, loss: str = CROSS_ENTROPY,
                      step: float = 1e-5, mode: str = "train", num_coords: int = 32,
                      seed=0, dropout_seed=0, atol: float = 1e-10) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at a coordinate is ``|a - c| / (|a| + |c| + 1e-12)``, taken as
    zero when ``|a - c| <= atol`` (round-off floor). Every pass reuses the
    same dropout mask and leaves running statistics untouched; batch
    statistics are recomputed from each perturbed pass.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = params.copy()
    _, grad = loss_and_grad(net, base, X, y, loss, mode, dropout_seed)
    rng = np.random.default_rng(seed)
    n = base.total_dim
    coords = rng.choice(n, size=min(num_coords, n), replace=False)
    worst = 0.0
    theta = base.flatten()
    for j in coords:
        vals = []
        for sign in (1.0, -1.0):
            shifted = theta.copy()
            shifted[j] += sign * step
            base.assign_(shifted)
            vals.append(loss_and_grad(net, base, X, y, loss, mode, dropout_seed)[0])
        base.assign_(theta)
        central = (vals[0] - vals[1]) / (2 * step)
        diff = abs(grad[j] - central)
        if diff <= atol:
            continue
        worst = max(worst, diff / (abs(grad[j]) + abs(central) + 1e-12))
    return worst


# ---------------------------------------------------------------------------
# snapshot serialization

_MAGIC = b"RSPS"
_VERSION = 1
_BUFFER_PREFIX = "buffer:"


def save_params(params: ParamSet, path) -> None:
    """Binary snapshot: header then one record per tensor, little-endian.

    Header: magic ``RSPS``, u32 version, u64 entry count. Record: u32 name
    length, UTF-8 name, u8 section (0 former, 1 latter), u32 rank, u64
    extents, f64 values. Batch-norm running statistics follow the trainable
    entries under a ``buffer:`` name prefix.
    """
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def dump_params(params: ParamSet) -> bytes:
    records = [(e.name, e.section, params[e.name]) for e in params.entries]
    records += [(_BUFFER_PREFIX + k, params.buffer_sections.get(k, FORMER), v)
                for k, v in params.buffers.items()]
    out = [_MAGIC, np.uint32(_VERSION).tobytes(), np.uint64(len(records)).tobytes()]
    for name, section, arr in records:
        raw = name.encode("utf-8")
        out.append(np.uint32(len(raw)).tobytes())
        out.append(raw)
        out.append(bytes([SECTIONS.index(section)]))
        out.append(np.uint32(arr.ndim).tobytes())
        out.append(np.asarray(arr.shape, dtype="<u8").tobytes())
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        return parse_params(fh.read())


def parse_params(data: bytes) -> ParamSet:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated parameter snapshot")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != _MAGIC:
        raise ValueError("not a parameter snapshot (bad magic)")
    version = int(np.frombuffer(take(4), "<u4")[0])
    if version != _VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    count = int(np.frombuffer(take(8), "<u8")[0])
    entries, chunks, buffers, buffer_sections = [], [], {}, {}
    offset = 0
    for _ in range(count):
        name_len = int(np.frombuffer(take(4), "<u4")[0])
        name = take(name_len).decode("utf-8")
        section = SECTIONS[take(1)[0]]
        rank = int(np.frombuffer(take(4), "<u4")[0])
        shape = tuple(int(s) for s in np.frombuffer(take(8 * rank), "<u8"))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * size), "<f8").astype(np.float64).reshape(shape)
        if name.startswith(_BUFFER_PREFIX):
            key = name[len(_BUFFER_PREFIX):]
            buffers[key] = values.copy()
            buffer_sections[key] = section
        else:
            entries.append(ParamEntry(name, shape, section, offset))
            chunks.append(values.ravel())
            offset += size
    if pos != len(data):
        raise ValueError("trailing bytes after parameter snapshot")
    vector = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamSet(entries, vector, buffers, buffer_sections)
