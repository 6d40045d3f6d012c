"""Architecture descriptors, network builders, and checkpoint serialization.

An ArchSpec is a flat list of layer descriptors (convs, residual blocks,
linears, pooling, normalizations, parallel groups). Descriptors are pure data:
the cost model walks them without instantiating weights, and `build_runtime`
turns them into runtime layers with Parameters.

A ModelBundle carries the four sections of the split network:

    base  - the shared stem (3x3 conv, 16 channels, BN+ReLU)
    mid   - the feature trunk ending in average pooling (64-d pooled output)
    re    - the pretraining classifier head, Linear(64, num_classes)
    hc    - the optional compact target-domain classifier

`forward_split` exposes the standard cut points: base output, pooled features,
unpooled (pre-pool, flattened) features, re logits, and hc probabilities.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .rng import stream
from .tensor import Parameter, Tensor

# -- layer descriptors --------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bn: bool = True
    activation: str = "none"       # "relu" | "none"
    is_projection: bool = False    # shortcut projections are not counted as depth


@dataclass(frozen=True)
class LinearSpec:
    in_features: int
    out_features: int
    activation: str = "none"


@dataclass(frozen=True)
class PoolSpec:
    k: int


@dataclass(frozen=True)
class FlattenSpec:
    pass


@dataclass(frozen=True)
class NormalizeSpec:
    kind: str  # "l1" | "l2" | "softmax"


@dataclass(frozen=True)
class BlockSpec:
    """Residual block: conv chain plus identity or 1x1 projection shortcut,
    ReLU after the add."""

    convs: tuple[ConvSpec, ...]
    shortcut: ConvSpec | None = None


@dataclass(frozen=True)
class ParallelSpec:
    """Parallel branches over the same input; outputs concatenate on the last axis."""

    groups: tuple[tuple, ...]


LayerSpec = (ConvSpec, LinearSpec, PoolSpec, FlattenSpec, NormalizeSpec, BlockSpec, ParallelSpec)

_KIND_NAMES = {
    ConvSpec: "conv",
    LinearSpec: "linear",
    PoolSpec: "pool",
    FlattenSpec: "flatten",
    NormalizeSpec: "normalize",
    BlockSpec: "block",
    ParallelSpec: "parallel",
}
_KIND_TYPES = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple

    def conv_layer_count(self) -> int:
        """Number of convolution layers on the main path.

        Shortcut projections are part of the skip connection and do not count
        toward depth, following the usual convention for residual networks.
        """
        return _count_convs(self.layers)

    def to_json(self) -> str:
        return json.dumps([_spec_to_obj(l) for l in self.layers],
                          separators=(",", ":"), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ArchSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed architecture JSON: {e}") from None
        return ArchSpec(tuple(_spec_from_obj(o) for o in raw))


def _count_convs(layers) -> int:
    n = 0
    for l in layers:
        if isinstance(l, ConvSpec):
            n += 0 if l.is_projection else 1
        elif isinstance(l, BlockSpec):
            n += _count_convs(l.convs)
            if l.shortcut is not None:
                n += _count_convs((l.shortcut,))
        elif isinstance(l, ParallelSpec):
            for g in l.groups:
                n += _count_convs(g)
    return n


def _spec_to_obj(l):
    # the type tag is "layer", not "kind": NormalizeSpec has a `kind` field
    obj = {"layer": _KIND_NAMES[type(l)]}
    if isinstance(l, BlockSpec):
        obj["convs"] = [_spec_to_obj(c) for c in l.convs]
        obj["shortcut"] = None if l.shortcut is None else _spec_to_obj(l.shortcut)
    elif isinstance(l, ParallelSpec):
        obj["groups"] = [[_spec_to_obj(x) for x in g] for g in l.groups]
    else:
        for f in l.__dataclass_fields__:
            obj[f] = getattr(l, f)
    return obj


def _spec_from_obj(obj):
    kind = obj.get("layer")
    if kind not in _KIND_TYPES:
        raise DataError(f"unknown layer kind {kind!r} in architecture JSON")
    cls = _KIND_TYPES[kind]
    if cls is BlockSpec:
        convs = tuple(_spec_from_obj(c) for c in obj["convs"])
        sc = obj.get("shortcut")
        return BlockSpec(convs=convs, shortcut=None if sc is None else _spec_from_obj(sc))
    if cls is ParallelSpec:
        return ParallelSpec(groups=tuple(tuple(_spec_from_obj(x) for x in g)
                                         for g in obj["groups"]))
    fields = {k: v for k, v in obj.items() if k != "layer"}
    tuple_fields = {k: tuple(v) for k, v in fields.items() if isinstance(v, list)}
    return cls(**{**fields, **tuple_fields})


# -- shape propagation --------------------------------------------------------


def layer_output_shape(spec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape of one layer for an unbatched input shape."""
    if isinstance(spec, ConvSpec):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        if c != spec.in_channels:
            raise ShapeError(f"conv expects {spec.in_channels} input channels, got {c}")
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {spec.kernel} empties a {h}x{w} input")
        return (spec.out_channels, ho, wo)
    if isinstance(spec, LinearSpec):
        if len(in_shape) != 1 or in_shape[0] != spec.in_features:
            raise ShapeError(f"linear expects ({spec.in_features},) input, got {in_shape}")
        return (spec.out_features,)
    if isinstance(spec, PoolSpec):
        if len(in_shape) != 3:
            raise ShapeError(f"pool expects [C,H,W] input, got {in_shape}")
        c, h, w = in_shape
        if h % spec.k or w % spec.k:
            raise ShapeError(f"pool window {spec.k} must divide spatial dims {h}x{w}")
        return (c, h // spec.k, w // spec.k)
    if isinstance(spec, FlattenSpec):
        return (int(np.prod(in_shape)),)
    if isinstance(spec, NormalizeSpec):
        if spec.kind not in ("l1", "l2", "softmax"):
            raise ConfigError(f"unknown normalize kind {spec.kind!r}")
        return in_shape
    if isinstance(spec, BlockSpec):
        shape = in_shape
        for c in spec.convs:
            shape = layer_output_shape(c, shape)
        sc_shape = in_shape if spec.shortcut is None else layer_output_shape(spec.shortcut, in_shape)
        if sc_shape != shape:
            raise ShapeError(f"residual shortcut shape {sc_shape} != body shape {shape}")
        return shape
    if isinstance(spec, ParallelSpec):
        outs = []
        for g in spec.groups:
            shape = in_shape
            for l in g:
                shape = layer_output_shape(l, shape)
            if len(shape) != 1:
                raise ShapeError(f"parallel group must end 1-D, got {shape}")
            outs.append(shape[0])
        return (sum(outs),)
    raise ConfigError(f"unknown layer spec {type(spec).__name__}")


def validate_arch(arch: ArchSpec, input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Propagate shapes through the whole spec; raises ShapeError on mismatch."""
    shape = tuple(input_shape)
    for spec in arch.layers:
        shape = layer_output_shape(spec, shape)
    return shape


# -- runtime layers -----------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ConvLayer:
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        self.weight = Parameter(_uniform(
            rng, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), fan_in))
        # bias is omitted when BN follows: it would be absorbed by beta
        self.bias = None if spec.has_bn else Parameter(_uniform(rng, (spec.out_channels,), fan_in))
        if spec.has_bn:
            self.gamma = Parameter(np.ones(spec.out_channels, dtype=np.float32))
            self.beta = Parameter(np.zeros(spec.out_channels, dtype=np.float32))
            self.running_mean = np.zeros(spec.out_channels, dtype=np.float32)
            self.running_var = np.ones(spec.out_channels, dtype=np.float32)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, stride=self.spec.stride,
                     padding=self.spec.padding)
        if self.spec.has_bn:
            y = T.batch_norm(y, self.gamma, self.beta, self.running_mean,
                             self.running_var, train)
        if self.spec.activation == "relu":
            y = T.relu(y)
        return y

    def params(self) -> list[Parameter]:
        out = [self.weight]
        if self.bias is not None:
            out.append(self.bias)
        if self.spec.has_bn:
            out += [self.gamma, self.beta]
        return out

    def state(self) -> dict[str, np.ndarray]:
        d = {"weight": self.weight.data}
        if self.bias is not None:
            d["bias"] = self.bias.data
        if self.spec.has_bn:
            d.update(gamma=self.gamma.data, beta=self.beta.data,
                     running_mean=self.running_mean, running_var=self.running_var)
        return d

    def load_state(self, d: dict[str, np.ndarray]) -> None:
        self.weight.data = d["weight"].copy()
        if self.bias is not None:
            self.bias.data = d["bias"].copy()
        if self.spec.has_bn:
            self.gamma.data = d["gamma"].copy()
            self.beta.data = d["beta"].copy()
            self.running_mean[...] = d["running_mean"]
            self.running_var[...] = d["running_var"]


class LinearLayer:
    def __init__(self, spec: LinearSpec, rng: np.random.Generator):
        self.spec = spec
        self.weight = Parameter(_uniform(rng, (spec.out_features, spec.in_features),
                                         spec.in_features))
        self.bias = Parameter(_uniform(rng, (spec.out_features,), spec.in_features))

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = T.linear(x, self.weight, self.bias)
        if self.spec.activation == "relu":
            y = T.relu(y)
        return y

    def params(self):
        return [self.weight, self.bias]

    def state(self):
        return {"weight": self.weight.data, "bias": self.bias.data}

    def load_state(self, d):
        self.weight.data = d["weight"].copy()
        self.bias.data = d["bias"].copy()


class PoolLayer:
    def __init__(self, spec: PoolSpec, rng=None):
        self.spec = spec

    def forward(self, x, train):
        return T.avg_pool(x, self.spec.k)

    def params(self):
        return []

    def state(self):
        return {}

    def load_state(self, d):
        pass


class FlattenLayer:
    def __init__(self, spec: FlattenSpec, rng=None):
        self.spec = spec

    def forward(self, x, train):
        return T.flatten_features(x)

    def params(self):
        return []

    def state(self):
        return {}

    def load_state(self, d):
        pass


class NormalizeLayer:
    def __init__(self, spec: NormalizeSpec, rng=None):
        self.spec = spec

    def forward(self, x, train):
        if self.spec.kind == "l1":
            return T.l1_normalize(x)
        if self.spec.kind == "l2":
            return T.l2_normalize(x)
        return T.softmax(x)

    def params(self):
        return []

    def state(self):
        return {}

    def load_state(self, d):
        pass


class BlockLayer:
    def __init__(self, spec: BlockSpec, rng: np.random.Generator):
        self.spec = spec
        self.body = [ConvLayer(c, rng) for c in spec.convs]
        self.shortcut = None if spec.shortcut is None else ConvLayer(spec.shortcut, rng)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        h = x
        for layer in self.body:
            h = layer.forward(h, train)
        s = x if self.shortcut is None else self.shortcut.forward(x, train)
        return T.relu(h + s)

    def params(self):
        out = []
        for layer in self.body:
            out += layer.params()
        if self.shortcut is not None:
            out += self.shortcut.params()
        return out

    def state(self):
        d = {}
        for i, layer in enumerate(self.body):
            for k, v in layer.state().items():
                d[f"body.{i}.{k}"] = v
        if self.shortcut is not None:
            for k, v in self.shortcut.state().items():
                d[f"shortcut.{k}"] = v
        return d

    def load_state(self, d):
        for i, layer in enumerate(self.body):
            layer.load_state({k.split(".", 2)[2]: v for k, v in d.items()
                              if k.startswith(f"body.{i}.")})
        if self.shortcut is not None:
            self.shortcut.load_state({k.split(".", 1)[1]: v for k, v in d.items()
                                      if k.startswith("shortcut.")})


class ParallelLayer:
    def __init__(self, spec: ParallelSpec, rng: np.random.Generator):
        self.spec = spec
        self.groups = [[_RUNTIME[type(l)](l, rng) for l in g] for g in spec.groups]

    def forward(self, x: Tensor, train: bool) -> Tensor:
        outs = []
        for g in self.groups:
            h = x
            for layer in g:
                h = layer.forward(h, train)
            outs.append(h)
        return T.concat(outs, axis=-1)

    def params(self):
        out = []
        for g in self.groups:
            for layer in g:
                out += layer.params()
        return out

    def state(self):
        d = {}
        for gi, g in enumerate(self.groups):
            for li, layer in enumerate(g):
                for k, v in layer.state().items():
                    d[f"g{gi}.{li}.{k}"] = v
        return d

    def load_state(self, d):
        for gi, g in enumerate(self.groups):
            for li, layer in enumerate(g):
                prefix = f"g{gi}.{li}."
                sub = {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}
                layer.load_state(sub)


_RUNTIME = {
    ConvSpec: ConvLayer,
    LinearSpec: LinearLayer,
    PoolSpec: PoolLayer,
    FlattenSpec: FlattenLayer,
    NormalizeSpec: NormalizeLayer,
    BlockSpec: BlockLayer,
    ParallelSpec: ParallelLayer,
}


class Sequential:
    """Runtime chain of layers built from an ArchSpec."""

    def __init__(self, arch: ArchSpec, rng: np.random.Generator):
        self.arch = arch
        self.layers = [_RUNTIME[type(spec)](spec, rng) for spec in arch.layers]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def params(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def state(self) -> dict[str, np.ndarray]:
        d = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.state().items():
                d[f"{i}.{k}"] = v
        return d

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}

    def load_state(self, d: dict[str, np.ndarray]) -> None:
        own = self.state()
        if set(d) != set(own):
            missing = sorted(set(own) - set(d))[:3]
            extra = sorted(set(d) - set(own))[:3]
            raise DataError(f"state keys mismatch (missing {missing}, unexpected {extra})")
        for k, v in d.items():
            if own[k].shape != v.shape:
                raise DataError(f"state entry {k}: shape {v.shape} != expected {own[k].shape}")
        for i, layer in enumerate(self.layers):
            prefix = f"{i}."
            layer.load_state({k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)})

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params():
            p.requires_grad = trainable


# -- architecture builders ----------------------------------------------------

STEM = ConvSpec(3, 16, 3, stride=1, padding=1, has_bn=True, activation="relu")


def _basic_block(cin: int, cout: int, stride: int) -> BlockSpec:
    convs = (
        ConvSpec(cin, cout, 3, stride=stride, padding=1, has_bn=True, activation="relu"),
        ConvSpec(cout, cout, 3, stride=1, padding=1, has_bn=True, activation="none"),
    )
    shortcut = None
    if stride != 1 or cin != cout:
        shortcut = ConvSpec(cin, cout, 1, stride=stride, padding=0, has_bn=True,
                            activation="none", is_projection=True)
    return BlockSpec(convs=convs, shortcut=shortcut)


def resnet20_specs(num_classes: int = 10):
    """Teacher: 3 groups of 3 basic blocks at 16/32/64 channels; 19 convs."""
    base = ArchSpec((STEM,))
    mid_layers = []
    cin = 16
    for cout, first_stride in ((16, 1), (32, 2), (64, 2)):
        for b in range(3):
            mid_layers.append(_basic_block(cin, cout, first_stride if b == 0 else 1))
            cin = cout
    mid_layers.append(PoolSpec(8))
    mid = ArchSpec(tuple(mid_layers))
    re = ArchSpec((FlattenSpec(), LinearSpec(64, num_classes)))
    return base, mid, re


@dataclass(frozen=True)
class SpearConfig:
    """Student trunk layout. Defaults give 46 convs, ~4.6M multiplications."""

    stage_blocks: tuple[int, int, int] = (5, 5, 4)
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    bottleneck_widths: tuple[int, int, int] = (8, 16, 32)

    def __post_init__(self):
        n = len(self.stage_blocks)
        if len(self.stage_channels) != n or len(self.bottleneck_widths) != n:
            raise ConfigError("stage_blocks, stage_channels, bottleneck_widths must align")
        if n != 3:
            raise ConfigError(
                f"exactly 3 stages required so a 32x32 input ends 4x4, got {n}")
        if self.stage_channels[-1] != 64:
            raise ConfigError(
                f"final stage must have 64 channels, got {self.stage_channels[-1]}")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("every stage needs at least one block")
        if any(w < 1 for w in self.bottleneck_widths):
            raise ConfigError("bottleneck widths must be positive")


def _spear_block(channels: int, width: int) -> BlockSpec:
    convs = (
        ConvSpec(channels, width, 1, has_bn=True, activation="relu"),
        ConvSpec(width, width, 3, stride=1, padding=1, has_bn=True, activation="relu"),
        ConvSpec(width, channels, 1, has_bn=True, activation="none"),
    )
    return BlockSpec(convs=convs, shortcut=None)


def spearnet_specs(cfg: SpearConfig = SpearConfig(), num_classes: int = 10):
    """Student: bottleneck residual stages behind the shared stem."""
    base = ArchSpec((STEM,))
    mid_layers = []
    cin = 16
    for blocks, cout, width in zip(cfg.stage_blocks, cfg.stage_channels, cfg.bottleneck_widths):
        mid_layers.append(ConvSpec(cin, cout, 3, stride=2, padding=1, has_bn=True,
                                   activation="relu"))
        mid_layers.extend(_spear_block(cout, width) for _ in range(blocks))
        cin = cout
    mid_layers.append(PoolSpec(4))
    mid = ArchSpec(tuple(mid_layers))
    re = ArchSpec((FlattenSpec(), LinearSpec(64, num_classes)))
    return base, mid, re


CLASSIFIER_VARIANTS = ("A1", "A2", "A3", "A4")


def classifier_spec(variant: str = "A1", enlarged: bool = False,
                    hidden: tuple[int, int] = (10240, 64),
                    in_features: int = 1024, num_categories: int = 4) -> ArchSpec:
    """Compact classifier family.

    A1/A2/A3 run `num_categories` parallel scoring groups over the unpooled
    features and differ in the normalization between concat and softmax
    (L1, L2, or another softmax). A4 is a single Linear(64, K) over the pooled
    features followed by L1 normalization and softmax. `enlarged` widens each
    group to hidden[0] -> hidden[1] -> 1 (A1-style groups only).
    """
    if variant not in CLASSIFIER_VARIANTS:
        raise ConfigError(f"unknown classifier variant {variant!r}")
    if variant == "A4":
        if enlarged:
            raise ConfigError("A4 has no parallel groups to enlarge")
        return ArchSpec((LinearSpec(64, num_categories),
                         NormalizeSpec("l1"), NormalizeSpec("softmax")))
    if enlarged:
        group = (LinearSpec(in_features, hidden[0], activation="relu"),
                 LinearSpec(hidden[0], hidden[1], activation="relu"),
                 LinearSpec(hidden[1], 1))
    else:
        group = (LinearSpec(in_features, 64, activation="relu"), LinearSpec(64, 1))
    parallel = ParallelSpec(groups=tuple(group for _ in range(num_categories)))
    norm = {"A1": NormalizeSpec("l1"), "A2": NormalizeSpec("l2"),
            "A3": NormalizeSpec("softmax")}[variant]
    return ArchSpec((parallel, norm, NormalizeSpec("softmax")))


# -- model bundle ---------------------------------------------------------------


@dataclass
class ModelBundle:
    base_spec: ArchSpec
    mid_spec: ArchSpec
    re_spec: ArchSpec
    base: Sequential
    mid: Sequential
    re: Sequential
    num_classes: int
    hc_spec: ArchSpec | None = None
    hc: Sequential | None = None
    pooled_len: int = field(default=64)
    unpooled_len: int = field(default=1024)

    def params(self, sections=("base", "mid", "re", "hc")) -> list[Parameter]:
        out = []
        for s in sections:
            seq = getattr(self, s)
            if seq is not None:
                out += seq.params()
        return out

    # forward helpers; callers control train-mode and grad-mode per section

    def forward_base(self, x: Tensor, train: bool = False) -> Tensor:
        return self.base.forward(x, train)

    def forward_mid_pooled(self, base_out: Tensor, train: bool = False) -> Tensor:
        return T.flatten_features(self.mid.forward(base_out, train))

    def forward_mid_unpooled(self, base_out: Tensor, train: bool = False) -> Tensor:
        h = base_out
        for layer in self.mid.layers[:-1]:
            h = layer.forward(h, train)
        return T.flatten_features(h)

    def forward_re(self, pooled: Tensor, train: bool = False) -> Tensor:
        h = pooled
        # re's flatten is a no-op on already-flat features
        for layer in self.re.layers:
            h = layer.forward(h, train)
        return h

    def forward_hc(self, features: Tensor, train: bool = False) -> Tensor:
        if self.hc is None:
            raise ConfigError("bundle has no hc classifier attached")
        return self.hc.forward(features, train)

    def hc_feature_kind(self) -> str:
        """Which feature cut hc consumes: 'pooled' (64) or 'unpooled' (1024)."""
        if self.hc_spec is None:
            raise ConfigError("bundle has no hc classifier attached")
        first = self.hc_spec.layers[0]
        if isinstance(first, ParallelSpec):
            n_in = first.groups[0][0].in_features
        elif isinstance(first, LinearSpec):
            n_in = first.in_features
        else:
            raise ConfigError("hc must start with a linear or parallel layer")
        if n_in == self.pooled_len:
            return "pooled"
        if n_in == self.unpooled_len:
            return "unpooled"
        raise ShapeError(
            f"hc input width {n_in} matches neither pooled ({self.pooled_len}) "
            f"nor unpooled ({self.unpooled_len}) features")

    def attach_hc(self, hc_spec: ArchSpec, seed: int) -> None:
        self.hc_spec = hc_spec
        self.hc = Sequential(hc_spec, stream(seed, "init-hc"))
        self.hc_feature_kind()  # validates the input width


CUT_POINTS = ("base", "mid_pooled", "mid_unpooled", "re", "hc")


def forward_split(bundle: ModelBundle, x: Tensor, upto: str, train: bool = False) -> Tensor:
    """Forward to one of the named cut points: base | mid_pooled | mid_unpooled | re | hc."""
    if upto not in CUT_POINTS:
        raise ConfigError(f"unknown cut point {upto!r}, expected one of {CUT_POINTS}")
    b = bundle.forward_base(x, train)
    if upto == "base":
        return b
    if upto == "mid_unpooled":
        return bundle.forward_mid_unpooled(b, train)
    if upto == "hc" and bundle.hc_feature_kind() == "unpooled":
        return bundle.forward_hc(bundle.forward_mid_unpooled(b, train), train)
    pooled = bundle.forward_mid_pooled(b, train)
    if upto == "mid_pooled":
        return pooled
    if upto == "re":
        return bundle.forward_re(pooled, train)
    return bundle.forward_hc(pooled, train)


def _assemble(base_spec, mid_spec, re_spec, num_classes, seed,
              input_shape=(3, 32, 32)) -> ModelBundle:
    base_out = validate_arch(base_spec, input_shape)
    mid_out = validate_arch(mid_spec, base_out)
    pooled_len = int(np.prod(mid_out))
    validate_arch(re_spec, mid_out)
    # unpooled cut: everything in mid except the trailing pool
    unpooled_shape = base_out
    for spec in mid_spec.layers[:-1]:
        unpooled_shape = layer_output_shape(spec, unpooled_shape)
    rng = stream(seed, "init")
    return ModelBundle(
        base_spec=base_spec, mid_spec=mid_spec, re_spec=re_spec,
        base=Sequential(base_spec, rng), mid=Sequential(mid_spec, rng),
        re=Sequential(re_spec, rng), num_classes=num_classes,
        pooled_len=pooled_len, unpooled_len=int(np.prod(unpooled_shape)),
    )


def build_resnet20(num_classes: int = 10, seed: int = 0) -> ModelBundle:
    base, mid, re = resnet20_specs(num_classes)
    return _assemble(base, mid, re, num_classes, seed)


def build_spearnet(cfg: SpearConfig = SpearConfig(), num_classes: int = 10,
                   seed: int = 0, teacher: ModelBundle | None = None) -> ModelBundle:
    """Build the student. With a teacher given, the stem weights are copied
    over (the stem is shared between the two networks and stays frozen)."""
    base, mid, re = spearnet_specs(cfg, num_classes)
    bundle = _assemble(base, mid, re, num_classes, seed)
    if teacher is not None:
        if teacher.base_spec != bundle.base_spec:
            raise ShapeError("teacher stem layout differs from student stem")
        bundle.base.load_state(teacher.base.snapshot())
        bundle.base.set_trainable(False)
    return bundle


def build_classifier(variant: str = "A1", enlarged: bool = False,
                     hidden: tuple[int, int] = (10240, 64), in_features: int = 1024,
                     num_categories: int = 4, seed: int = 0) -> Sequential:
    spec = classifier_spec(variant, enlarged, hidden, in_features, num_categories)
    validate_arch(spec, (in_features if variant != "A4" else 64,))
    return Sequential(spec, stream(seed, "init-hc"))


# -- checkpoint container -------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic    8 bytes  b"CEDGCKPT"
#   version  u32      currently 1
#   hash     32 bytes sha256 over the meta JSON (architecture fingerprint)
#   meta     u32 length + UTF-8 JSON {sections: {name: arch-json-or-null}, num_classes}
#   count    u32      number of tensor records, then for each record:
#     name   u16 length + UTF-8 bytes ("<section>/<key>")
#     ndim   u8, then ndim * u32 dims
#     data   raw little-endian float32, C order

CKPT_MAGIC = b"CEDGCKPT"
CKPT_VERSION = 1


def _bundle_meta(bundle: ModelBundle) -> dict:
    return {
        "sections": {
            "base": bundle.base_spec.to_json(),
            "mid": bundle.mid_spec.to_json(),
            "re": bundle.re_spec.to_json(),
            "hc": None if bundle.hc_spec is None else bundle.hc_spec.to_json(),
        },
        "num_classes": bundle.num_classes,
    }


def arch_hash(bundle: ModelBundle) -> str:
    meta = json.dumps(_bundle_meta(bundle), separators=(",", ":"), sort_keys=True)
    return hashlib.sha256(meta.encode()).hexdigest()


def save_bundle(path, bundle: ModelBundle) -> None:
    meta_json = json.dumps(_bundle_meta(bundle), separators=(",", ":"), sort_keys=True)
    digest = hashlib.sha256(meta_json.encode()).digest()
    tensors: list[tuple[str, np.ndarray]] = []
    for section in ("base", "mid", "re", "hc"):
        seq = getattr(bundle, section)
        if seq is None:
            continue
        for k, v in sorted(seq.state().items()):
            tensors.append((f"{section}/{k}", v))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(digest)
        mb = meta_json.encode()
        f.write(struct.pack("<I", len(mb)))
        f.write(mb)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DataError(f"checkpoint truncated while reading {what}")
    return b


def load_bundle(path) -> ModelBundle:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open checkpoint {path}: {e}") from None
    with f:
        if _read_exact(f, 8, "magic") != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_exact(f, 32, "hash")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "meta length"))
        try:
            meta_json = _read_exact(f, meta_len, "meta").decode()
        except UnicodeDecodeError:
            raise DataError(f"{path}: corrupt checkpoint metadata") from None
        if hashlib.sha256(meta_json.encode()).digest() != digest:
            raise DataError(f"{path}: architecture hash mismatch")
        meta = json.loads(meta_json)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
            n = int(np.prod(dims)) if ndim else 1
            raw = _read_exact(f, 4 * n, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after last tensor")

    sections = meta["sections"]
    base_spec = ArchSpec.from_json(sections["base"])
    mid_spec = ArchSpec.from_json(sections["mid"])
    re_spec = ArchSpec.from_json(sections["re"])
    bundle = _assemble(base_spec, mid_spec, re_spec, meta["num_classes"], seed=0)
    if sections["hc"] is not None:
        bundle.attach_hc(ArchSpec.from_json(sections["hc"]), seed=0)
    for section in ("base", "mid", "re", "hc"):
        seq = getattr(bundle, section)
        if seq is None:
            continue
        prefix = f"{section}/"
        seq.load_state({k[len(prefix):]: v for k, v in tensors.items()
                        if k.startswith(prefix)})
    return bundle
