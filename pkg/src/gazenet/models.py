"""Network constructors: residual/hourglass gazemap network, DenseNet regressor, baselines.

Parameters live in a shared :class:`~gazenet.tensor.ParameterStore` under
``<stage>/<block>/<layer>/<tensor>`` names.  Layers are thin objects that
look their tensors up by name at call time, so loading new values into the
store is all it takes to swap weights.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import BatchNormState
from .tensor import ParameterStore, Tensor

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class DenseNetConfig:
    blocks: int = 5
    layers_per_block: int = 5
    growth_rate: int = 8
    bottleneck_factor: int = 4
    compression: float = 0.5


@dataclass(frozen=True)
class NetworkConfig:
    input_size: Tuple[int, int] = (90, 150)  # (height, width)
    stem_channels: int = 64
    hourglass_count: int = 3
    hourglass_channels: int = 64
    hourglass_depth: int = 4
    gazemap_channels: int = 2
    densenet: DenseNetConfig = field(default_factory=DenseNetConfig)

    @property
    def gazemap_size(self) -> Tuple[int, int]:
        h, w = self.input_size
        return (h + 2 * 3 - 7) // 2 + 1, (w + 2 * 3 - 7) // 2 + 1

    def replace(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


PRESETS: Dict[str, NetworkConfig] = {
    "paper": NetworkConfig(),
    "desk": NetworkConfig(
        input_size=(48, 80), stem_channels=16, hourglass_count=2, hourglass_channels=16,
        hourglass_depth=3, densenet=DenseNetConfig(blocks=3, layers_per_block=4, growth_rate=8),
    ),
}


def get_preset(name: str) -> NetworkConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class Context:
    """Per-forward settings: training mode and the dropout random stream."""

    train: bool = True
    rng: Optional[np.random.Generator] = None


# ------------------------------------------------------------------ init

def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples redrawn until within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    # truncation at 2 sigma shrinks the std by this factor
    return out * (std / 0.8796256610342398)


# ------------------------------------------------------------------ layers

class Layer:
    def __init__(self, store: ParameterStore, name: str):
        self.store = store
        self.name = name

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return self.forward(x, ctx)

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        raise NotImplementedError

    def describe(self) -> List[str]:
        return [f"{self.name}: {type(self).__name__}"]


class Conv(Layer):
    def __init__(self, store, name, c_in, c_out, k, stride=1, padding=None, seed=0):
        super().__init__(store, name)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.shape = (c_out, c_in, k, k)
        fan_in = c_in * k * k
        w = truncated_normal(_name_rng(seed, name), self.shape, math.sqrt(2.0 / fan_in))
        self.w = store.add(f"{name}/weight", w.astype(np.float32))
        self.b = store.add(f"{name}/bias", np.zeros(c_out, dtype=np.float32))

    def forward(self, x, ctx):
        return ops.conv2d(x, self.store[f"{self.name}/weight"], self.store[f"{self.name}/bias"],
                          self.stride, self.padding)

    def describe(self):
        o, c, k, _ = self.shape
        return [f"{self.name}: conv{k}-{o} (in {c}, s={self.stride}, p={self.padding})"]


class Linear(Layer):
    def __init__(self, store, name, f_in, f_out, seed=0):
        super().__init__(store, name)
        self.shape = (f_in, f_out)
        w = truncated_normal(_name_rng(seed, name), self.shape, math.sqrt(2.0 / f_in))
        store.add(f"{name}/weight", w.astype(np.float32))
        store.add(f"{name}/bias", np.zeros(f_out, dtype=np.float32))

    def forward(self, x, ctx):
        if x.ndim != 2:
            x = ops.flatten(x)
        return ops.linear(x, self.store[f"{self.name}/weight"], self.store[f"{self.name}/bias"])

    def describe(self):
        return [f"{self.name}: FC-{self.shape[1]} (in {self.shape[0]})"]


class BatchNorm(Layer):
    def __init__(self, store, name, channels):
        super().__init__(store, name)
        store.add(f"{name}/gamma", np.ones(channels, dtype=np.float32))
        store.add(f"{name}/beta", np.zeros(channels, dtype=np.float32))

    def forward(self, x, ctx):
        bufs = self.store.buffers
        rm, rv = f"{self.name}/running_mean", f"{self.name}/running_var"
        state = BatchNormState(bufs.get(rm), bufs.get(rv))
        out = ops.batch_norm(x, self.store[f"{self.name}/gamma"], self.store[f"{self.name}/beta"],
                             state, ctx.train)
        if ctx.train:
            # stored in 32-bit like the weights so files round-trip exactly
            bufs[rm] = state.running_mean.astype(np.float32)
            bufs[rv] = state.running_var.astype(np.float32)
        return out


class BNReLUConv(Layer):
    """Pre-activation unit: batch norm, ReLU, convolution."""

    def __init__(self, store, name, c_in, c_out, k, seed=0):
        super().__init__(store, name)
        self.bn = BatchNorm(store, f"{name}/bn", c_in)
        self.conv = Conv(store, f"{name}/conv", c_in, c_out, k, seed=seed)

    def forward(self, x, ctx):
        return self.conv(ops.relu(self.bn(x, ctx)), ctx)

    def describe(self):
        return [f"{self.name}: bn-relu-" + self.conv.describe()[0].split(": ", 1)[1]]


class Residual(Layer):
    """Pre-activation bottleneck residual block (1x1 -> 3x3 -> 1x1 at half width)."""

    def __init__(self, store, name, c_in, c_out, seed=0):
        super().__init__(store, name)
        mid = max(c_out // 2, 1)
        self.c_in, self.c_out = c_in, c_out
        self.units = [
            BNReLUConv(store, f"{name}/a", c_in, mid, 1, seed),
            BNReLUConv(store, f"{name}/b", mid, mid, 3, seed),
            BNReLUConv(store, f"{name}/c", mid, c_out, 1, seed),
        ]
        self.skip = Conv(store, f"{name}/skip", c_in, c_out, 1, seed=seed) if c_in != c_out else None

    def forward(self, x, ctx):
        y = x
        for unit in self.units:
            y = unit(y, ctx)
        return y + (self.skip(x, ctx) if self.skip is not None else x)

    def describe(self):
        out = [f"{self.name}: residual {self.c_in}->{self.c_out}"]
        for unit in self.units:
            out += ["  " + d for d in unit.describe()]
        return out


def hourglass_sizes(h: int, w: int, depth: int) -> List[Tuple[int, int]]:
    """Spatial size entering each hourglass level, followed by the bottom size."""
    sizes = [(h, w)]
    for _ in range(depth):
        h, w = sizes[-1]
        if h < 2 or w < 2:
            raise ValueError(f"hourglass too deep: level size {h}x{w} cannot be pooled")
        sizes.append((h // 2, w // 2))
    return sizes


class Hourglass(Layer):
    """Recursive encoder-decoder: residual, max-pool, recurse, upsample, add skip residual."""

    def __init__(self, store, name, depth, channels, seed=0):
        super().__init__(store, name)
        if depth < 1:
            raise ValueError("hourglass depth must be >= 1")
        self.depth = depth
        self.skip = Residual(store, f"{name}/skip", channels, channels, seed)
        self.down = Residual(store, f"{name}/down", channels, channels, seed)
        if depth > 1:
            self.inner = Hourglass(store, f"{name}/inner", depth - 1, channels, seed)
        else:
            self.inner = Residual(store, f"{name}/bottom", channels, channels, seed)
        self.last_sizes: List[Tuple[int, int]] = []

    def forward(self, x, ctx):
        h, w = x.shape[2:]
        if h < 2 or w < 2:
            raise ValueError(f"hourglass level {self.name} received {h}x{w}; cannot pool")
        skip = self.skip(x, ctx)
        low = ops.pool2d(self.down(x, ctx), "max", 2, 2)
        low = self.inner(low, ctx)
        up = ops.upsample_nearest(low, h, w)
        sizes = [(h, w)] + (self.inner.last_sizes if isinstance(self.inner, Hourglass) else [low.shape[2:]])
        self.last_sizes = [tuple(s) for s in sizes]
        return skip + up

    def describe(self):
        return ([f"{self.name}: hourglass depth {self.depth}"] + self.skip.describe()
                + self.down.describe() + ["  max-pool 2x2 s2"] + self.inner.describe()
                + ["  upsample nearest + add skip"])


# ------------------------------------------------------------------ networks

class Network:
    """A built graph: a parameter store plus an ordered layer description."""

    outputs: Tuple[str, ...] = ()

    def __init__(self, store: Optional[ParameterStore] = None):
        self.store = store if store is not None else ParameterStore()

    def forward(self, x: Tensor, ctx: Optional[Context] = None) -> Dict[str, Tensor]:
        raise NotImplementedError

    def __call__(self, x, ctx=None):
        return self.forward(x, ctx or Context())

    def describe(self) -> List[str]:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return count_parameters(self)


class GazemapNetwork(Network):
    """Stem plus stacked hourglasses predicting two gazemap logit channels.

    Between hourglasses the intermediate (unsupervised) maps and the
    processed features are re-embedded by 1x1 convolutions and added to the
    running feature tensor.  Only the last head is supervised.
    """

    outputs = ("gazemap_logits",)

    def __init__(self, cfg: NetworkConfig, store=None, seed=0, prefix="hourglass"):
        super().__init__(store)
        self.cfg = cfg
        h, w = cfg.input_size
        if h < 7 or w < 7:
            raise ValueError(f"input size {cfg.input_size} too small for the 7x7 stem")
        gh, gw = cfg.gazemap_size
        hourglass_sizes(gh, gw, cfg.hourglass_depth)  # validates depth against the grid
        s, c, k = self.store, cfg.hourglass_channels, cfg.gazemap_channels
        p = prefix
        self.stem_conv = Conv(s, f"{p}/stem/conv", 1, cfg.stem_channels, 7, stride=2, padding=3, seed=seed)
        self.stem_bn = BatchNorm(s, f"{p}/stem/bn", cfg.stem_channels)
        self.stem_res = [Residual(s, f"{p}/stem/res0", cfg.stem_channels, c, seed),
                         Residual(s, f"{p}/stem/res1", c, c, seed)]
        self.modules = []
        for i in range(cfg.hourglass_count):
            last = i == cfg.hourglass_count - 1
            m = {
                "hg": Hourglass(s, f"{p}/hg{i}/module", cfg.hourglass_depth, c, seed),
                "post": BNReLUConv(s, f"{p}/hg{i}/post", c, c, 1, seed),
                "head": Conv(s, f"{p}/hg{i}/head", c, k, 1, seed=seed),
            }
            if not last:
                m["remap_maps"] = Conv(s, f"{p}/hg{i}/remap_maps", k, c, 1, seed=seed)
                m["remap_features"] = Conv(s, f"{p}/hg{i}/remap_features", c, c, 1, seed=seed)
            self.modules.append(m)
        self.supervised_heads = [f"{p}/hg{cfg.hourglass_count - 1}/head"]

    def forward(self, x, ctx=None):
        ctx = ctx or Context()
        if tuple(x.shape[2:]) != tuple(self.cfg.input_size) or x.shape[1] != 1:
            raise ValueError(f"expected input N x 1 x {self.cfg.input_size}, got {x.shape}")
        y = ops.relu(self.stem_bn(self.stem_conv(x, ctx), ctx))
        for r in self.stem_res:
            y = r(y, ctx)
        intermediate = []
        logits = None
        for m in self.modules:
            feats = m["post"](m["hg"](y, ctx), ctx)
            maps = m["head"](feats, ctx)
            if "remap_maps" in m:
                intermediate.append(maps)
                y = y + m["remap_features"](feats, ctx) + m["remap_maps"](maps, ctx)
            else:
                logits = maps
        return {"gazemap_logits": logits, "intermediate_maps": intermediate}

    def describe(self):
        out = [d for d in self.stem_conv.describe()] + [f"{self.stem_bn.name}: batchnorm + relu"]
        for r in self.stem_res:
            out += r.describe()
        for m in self.modules:
            for layer in m.values():
                out += layer.describe()
        return out


class DenseLayer(Layer):
    def __init__(self, store, name, c_in, growth, bottleneck, seed=0):
        super().__init__(store, name)
        self.reduce = BNReLUConv(store, f"{name}/bottleneck", c_in, bottleneck * growth, 1, seed)
        self.conv = BNReLUConv(store, f"{name}/conv", bottleneck * growth, growth, 3, seed)

    def forward(self, x, ctx):
        return ops.concat([x, self.conv(self.reduce(x, ctx), ctx)], axis=1)

    def describe(self):
        return self.reduce.describe() + self.conv.describe()


class DenseNetRegressor(Network):
    """DenseNet-BC mapping 2-channel gazemaps to (pitch, yaw)."""

    outputs = ("gaze_angles",)

    def __init__(self, cfg: NetworkConfig, store=None, seed=0, prefix="densenet"):
        super().__init__(store)
        self.cfg = cfg
        d = cfg.densenet
        s, g = self.store, d.growth_rate
        h, w = cfg.gazemap_size
        c = 2 * g
        self.conv0 = Conv(s, f"{prefix}/init/conv", cfg.gazemap_channels, c, 3, seed=seed)
        self.trace: List[Tuple[str, int, Tuple[int, int]]] = [("init", c, (h, w))]
        self.stages: List[Layer] = []
        for b in range(d.blocks):
            for i in range(d.layers_per_block):
                self.stages.append(DenseLayer(s, f"{prefix}/block{b}/layer{i}", c, g, d.bottleneck_factor, seed))
                c += g
            self.trace.append((f"block{b}", c, (h, w)))
            if b < d.blocks - 1:
                if h < 2 or w < 2:
                    raise ValueError(f"DenseNet spatial size {h}x{w} underflows before block {b + 1}")
                c_out = int(math.floor(d.compression * c))
                self.stages.append(_Transition(s, f"{prefix}/transition{b}", c, c_out, seed))
                c, h, w = c_out, h // 2, w // 2
                self.trace.append((f"transition{b}", c, (h, w)))
        self.final_bn = BatchNorm(s, f"{prefix}/final/bn", c)
        self.fc = Linear(s, f"{prefix}/final/fc", c, 2, seed=seed)
        self.out_features = c
        log.debug("densenet channel trace: %s", self.trace)

    def forward(self, x, ctx=None):
        ctx = ctx or Context()
        y = self.conv0(x, ctx)
        for stage in self.stages:
            y = stage(y, ctx)
        y = ops.global_avg_pool(ops.relu(self.final_bn(y, ctx)))
        return {"gaze_angles": self.fc(y, ctx)}

    def describe(self):
        out = self.conv0.describe()
        for st in self.stages:
            out += st.describe()
        return out + [f"{self.final_bn.name}: batchnorm + relu + global-avg-pool"] + self.fc.describe()


class _Transition(Layer):
    def __init__(self, store, name, c_in, c_out, seed=0):
        super().__init__(store, name)
        self.unit = BNReLUConv(store, name, c_in, c_out, 1, seed)

    def forward(self, x, ctx):
        return ops.pool2d(self.unit(x, ctx), "avg", 2, 2)

    def describe(self):
        return self.unit.describe() + ["  avg-pool 2x2 s2"]


class GazeNet(Network):
    """Full pipeline: eye image -> gazemap logits -> sigmoid -> DenseNet -> angles.

    The regressor sees nothing but the gazemap probabilities.
    """

    outputs = ("gazemap_logits", "gaze_angles")

    def __init__(self, cfg: NetworkConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        self.gazemap_net = GazemapNetwork(cfg, self.store, seed, prefix="hourglass")
        self.regressor = DenseNetRegressor(cfg, self.store, seed, prefix="densenet")

    def forward(self, x, ctx=None):
        ctx = ctx or Context()
        out = self.gazemap_net.forward(x, ctx)
        probs = ops.sigmoid(out["gazemap_logits"])
        out["gazemap"] = probs
        out.update(self.regressor.forward(probs, ctx))
        return out

    def describe(self):
        return self.gazemap_net.describe() + ["bottleneck: sigmoid(gazemap_logits)"] + self.regressor.describe()


# ------------------------------------------------------------------ baselines

# (kind, spec) rows; conv = (kernel, channels, stride), pool = (kernel, stride)
ALEXNET = [
    ("conv", (9, 96, 2)), ("lrn", None), ("maxpool", (3, 2)),
    ("conv", (5, 256, 1)), ("lrn", None), ("maxpool", (3, 2)),
    ("conv", (3, 384, 1)), ("conv", (3, 384, 1)), ("conv", (3, 256, 1)), ("maxpool", (3, 2)),
    ("fc", 4096), ("dropout", 0.5), ("fc", 4096), ("dropout", 0.5), ("fc_out", 2),
]
VGG16 = [
    ("conv", (3, 64, 1)), ("conv", (3, 64, 1)), ("maxpool", (2, 1)),
    ("conv", (3, 128, 1)), ("conv", (3, 128, 1)), ("maxpool", (2, 2)),
    ("conv", (3, 256, 1)), ("conv", (3, 256, 1)), ("conv", (3, 256, 1)), ("maxpool", (2, 2)),
    ("conv", (3, 512, 1)), ("conv", (3, 512, 1)), ("conv", (3, 512, 1)), ("maxpool", (2, 2)),
    ("conv", (3, 512, 1)), ("conv", (3, 512, 1)), ("conv", (3, 512, 1)), ("maxpool", (2, 2)),
    ("dropout", 0.5), ("fc", 4096), ("dropout", 0.5), ("fc", 4096), ("fc_out", 2),
]
BASELINES = {"alexnet": ALEXNET, "vgg16": VGG16}


class Baseline(Network):
    """AlexNet / VGG-16 style regressors with width-scaled channels."""

    outputs = ("gaze_angles",)

    def __init__(self, kind: str, width_multiplier: float = 1.0, input_size=(90, 150), seed=0):
        super().__init__()
        if kind not in BASELINES:
            raise ValueError(f"unknown baseline {kind!r}; choose from {sorted(BASELINES)}")
        if not 0 < width_multiplier <= 1:
            raise ValueError("width_multiplier must be in (0, 1]")
        self.kind = kind
        s = self.store
        c, (h, w) = 1, input_size
        self.layers: List[Tuple[str, object]] = []
        n_conv = n_fc = 0
        flat = None
        for op, arg in BASELINES[kind]:
            if op == "conv":
                k, ch, stride = arg
                ch = int(math.ceil(ch * width_multiplier))
                layer = Conv(s, f"{kind}/conv{n_conv}", c, ch, k, stride=stride, seed=seed)
                self.layers.append(("conv", layer))
                n_conv += 1
                c = ch
                h = (h + 2 * layer.padding - k) // stride + 1
                w = (w + 2 * layer.padding - k) // stride + 1
            elif op == "lrn":
                self.layers.append(("lrn", None))
            elif op == "maxpool":
                k, stride = arg
                self.layers.append(("maxpool", arg))
                h, w = (h - k) // stride + 1, (w - k) // stride + 1
            elif op == "dropout":
                self.layers.append(("dropout", arg))
            else:
                f_in = flat if flat is not None else c * h * w
                f_out = 2 if op == "fc_out" else int(math.ceil(arg * width_multiplier))
                self.layers.append((op, Linear(s, f"{kind}/fc{n_fc}", f_in, f_out, seed=seed)))
                n_fc += 1
                flat = f_out
            if h < 1 or w < 1:
                raise ValueError(f"{kind} collapses the {input_size} input to {h}x{w}")

    def forward(self, x, ctx=None):
        ctx = ctx or Context()
        for op, arg in self.layers:
            if op == "conv":
                x = ops.relu(arg(x, ctx))
            elif op == "lrn":
                x = ops.local_response_norm(x, depth=5, alpha=1e-4, beta=0.75, k=2.0)
            elif op == "maxpool":
                x = ops.pool2d(x, "max", *arg)
            elif op == "dropout":
                x = ops.dropout(x, arg, ctx.train, ctx.rng)
            elif op == "fc":
                x = ops.relu(arg(x, ctx))
            else:
                x = arg(x, ctx)
        return {"gaze_angles": x}

    def layer_sequence(self) -> List[str]:
        return [op for op, _ in self.layers]

    def describe(self):
        out = []
        for op, arg in self.layers:
            if isinstance(arg, Layer):
                out += arg.describe()
            else:
                out.append(f"{op} {arg}" if arg is not None else op)
        return out


# ------------------------------------------------------------------ builders

def build_residual_block(c_in: int, c_out: int, store=None, name="block", seed=0) -> Residual:
    if c_in < 1 or c_out < 1:
        raise ValueError("channel counts must be positive")
    return Residual(store if store is not None else ParameterStore(), name, c_in, c_out, seed)


def build_hourglass_module(depth: int, channels: int, store=None, name="hourglass", seed=0) -> Hourglass:
    return Hourglass(store if store is not None else ParameterStore(), name, depth, channels, seed)


def build_gazemap_network(cfg: NetworkConfig, seed=0) -> GazemapNetwork:
    return GazemapNetwork(cfg, seed=seed)


def build_densenet_regressor(cfg: NetworkConfig, seed=0) -> DenseNetRegressor:
    return DenseNetRegressor(cfg, seed=seed)


def build_full_pipeline(cfg: NetworkConfig, seed=0) -> GazeNet:
    return GazeNet(cfg, seed)


def build_baseline(kind: str, width_multiplier: float = 1.0, seed=0, input_size=(90, 150)) -> Baseline:
    return Baseline(kind, width_multiplier, input_size, seed)


def count_parameters(net) -> int:
    """Number of trainable scalars; accepts a network, a layer or a bare store."""
    store = net if isinstance(net, ParameterStore) else net.store
    if isinstance(net, Layer):
        return store.num_parameters(prefix=net.name + "/")
    return store.num_parameters()
