"""Network specifications, the two-model zoo, and model assembly.

A NetworkSpec is an ordered chain of layer descriptors validated against
the declared input shape. ``build_model`` instantiates it either in
search mode (searchable convs get the full candidate pool) or in fixed
mode (searchable positions become single-branch quantized convs at the
bit-widths given by a discrete assignment).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .complexity import FilterCost
from .layers import (
    AvgPoolLayer,
    BatchNormLayer,
    BitPool,
    Conv2dLayer,
    FlattenLayer,
    Layer,
    LinearLayer,
    MaxPoolLayer,
    MpsConvLayer,
    ReLULayer,
    ResidualBlock,
)
from .tensor import Tensor


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    layer_id: str
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    searchable: bool = True
    pool: BitPool | None = None


@dataclass(frozen=True)
class LinearSpec:
    layer_id: str
    out_features: int


@dataclass(frozen=True)
class BNSpec:
    layer_id: str


@dataclass(frozen=True)
class ReLUSpec:
    pass


@dataclass(frozen=True)
class MaxPoolSpec:
    kernel: int
    stride: int


@dataclass(frozen=True)
class AvgPoolSpec:
    kernel: int
    stride: int


@dataclass(frozen=True)
class FlattenSpec:
    pass


@dataclass(frozen=True)
class ResidualBlockSpec:
    layer_id: str
    channels: int
    stride: int = 1          # 2 downsamples with a 2x2 average pool at entry
    pool: BitPool | None = None


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple       # (C, H, W)
    num_classes: int
    layers: tuple


class Model:
    """An assembled network: ordered layers plus searchable-layer bookkeeping."""

    def __init__(self, spec: NetworkSpec, layers, searchable, costs):
        self.spec = spec
        self.layers = layers
        self._searchable = searchable          # ordered list of MpsConvLayer
        self.costs = costs                     # ordered dict layer_id -> FilterCost

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def searchable_layers(self):
        return list(self._searchable)

    def arch_state(self):
        return [(l.layer_id, l.pi_alpha(), l.pi_beta(), l.pool) for l in self._searchable]

    def params_weight(self):
        return [p for l in self.layers for p in l.params_weight()]

    def params_other(self):
        return [p for l in self.layers for p in l.params_other()]

    def params_arch(self):
        return [p for l in self.layers for p in l.params_arch()]

    def state_items(self):
        """Ordered (name, array-or-tensor) pairs covering all state."""
        out = []
        for l in self.layers:
            out.extend(l.state_arrays().items())
        return out

    def state_dict(self):
        return {name: (v.data if isinstance(v, Tensor) else v).copy() for name, v in self.state_items()}

    def load_state_dict(self, arrays: dict) -> None:
        for name, v in self.state_items():
            if name not in arrays:
                raise ModelSpecError(f"checkpoint is missing tensor '{name}'")
            target = v.data if isinstance(v, Tensor) else v
            src = np.asarray(arrays[name])
            if src.shape != target.shape:
                raise ModelSpecError(
                    f"checkpoint tensor '{name}' has shape {src.shape}, expected {target.shape}"
                )
            target[...] = src


# --------------------------------------------------------------------------
# assembly


def _conv_extent(extent, k, stride, pad):
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        return None
    return span // stride + 1


class _Builder:
    def __init__(self, spec, mode, assignments, rng, default_pool, share_weights, arch_init):
        if mode not in ("search", "fixed"):
            raise ModelSpecError(f"unknown build mode {mode!r}")
        if mode == "fixed" and assignments is None:
            raise ModelSpecError("fixed mode needs a bit-width assignment per searchable layer")
        self.spec = spec
        self.mode = mode
        self.assignments = assignments or {}
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.default_pool = default_pool or BitPool()
        self.share_weights = share_weights
        self.arch_init = arch_init
        self.layers: list[Layer] = []
        self.searchable: list[MpsConvLayer] = []
        self.costs: dict[str, FilterCost] = {}

    def fail(self, layer_id, msg):
        raise ModelSpecError(f"layer '{layer_id}' ({self.spec.name}): {msg}")

    def make_searchable_conv(self, d: ConvSpec, c, h, w):
        if self.mode == "search":
            pool = d.pool or self.default_pool
        else:
            if d.layer_id not in self.assignments:
                self.fail(d.layer_id, "architecture has no bit-width entry for this layer")
            # assignments may come from an extended pool (sensitivity probes)
            wb, ab = self.assignments[d.layer_id]
            pool = BitPool(weight_bits=(int(wb),), activation_bits=(int(ab),))
        layer = MpsConvLayer(
            d.layer_id, c, d.out_channels, d.kernel, stride=d.stride, pad=d.pad,
            pool=pool, rng=self.rng, share_weights=self.share_weights, arch_init=self.arch_init,
        )
        self.searchable.append(layer)
        self.costs[d.layer_id] = FilterCost(
            cardinality=layer.filter_cardinality, input_width=w, input_height=h, stride=d.stride
        )
        return layer

    def add_conv(self, d: ConvSpec, c, h, w):
        ho = _conv_extent(h, d.kernel, d.stride, d.pad)
        wo = _conv_extent(w, d.kernel, d.stride, d.pad)
        if ho is None or wo is None:
            self.fail(d.layer_id, f"conv k={d.kernel} s={d.stride} p={d.pad} does not tile {h}x{w}")
        if d.searchable:
            self.layers.append(self.make_searchable_conv(d, c, h, w))
        else:
            self.layers.append(
                Conv2dLayer(d.layer_id, c, d.out_channels, d.kernel, d.stride, d.pad, rng=self.rng)
            )
        return d.out_channels, ho, wo

    def add_block(self, d: ResidualBlockSpec, c, h, w):
        if d.stride not in (1, 2):
            self.fail(d.layer_id, f"residual stride must be 1 or 2, got {d.stride}")
        entry = None
        if d.stride == 2:
            if h % 2 or w % 2:
                self.fail(d.layer_id, f"cannot halve odd extent {h}x{w}")
            entry = AvgPoolLayer(f"{d.layer_id}.pool", 2, 2)
            h, w = h // 2, w // 2
        base = d.layer_id
        conv1 = self.make_searchable_conv(
            ConvSpec(f"{base}.conv1", d.channels, 3, 1, 1, pool=d.pool), c, h, w
        )
        bn1 = BatchNormLayer(f"{base}.bn1", d.channels)
        conv2 = self.make_searchable_conv(
            ConvSpec(f"{base}.conv2", d.channels, 3, 1, 1, pool=d.pool), d.channels, h, w
        )
        bn2 = BatchNormLayer(f"{base}.bn2", d.channels)
        sc_conv = sc_bn = None
        if c != d.channels:
            sc_conv = self.make_searchable_conv(
                ConvSpec(f"{base}.shortcut", d.channels, 1, 1, 0, pool=d.pool), c, h, w
            )
            sc_bn = BatchNormLayer(f"{base}.shortcut_bn", d.channels)
        self.layers.append(ResidualBlock(base, entry, conv1, bn1, conv2, bn2, sc_conv, sc_bn))
        return d.channels, h, w

    def build(self):
        shape = self.spec.input_shape
        if len(shape) != 3 or any(int(e) <= 0 for e in shape):
            raise ModelSpecError(f"input shape must be (C, H, W) positive, got {shape}")
        c, h, w = (int(e) for e in shape)
        flat = None
        for d in self.spec.layers:
            if isinstance(d, (ConvSpec, BNSpec, MaxPoolSpec, AvgPoolSpec, ResidualBlockSpec)) and flat is not None:
                self.fail(getattr(d, "layer_id", type(d).__name__), "image op after flatten")
            if isinstance(d, ConvSpec):
                c, h, w = self.add_conv(d, c, h, w)
            elif isinstance(d, ResidualBlockSpec):
                c, h, w = self.add_block(d, c, h, w)
            elif isinstance(d, BNSpec):
                self.layers.append(BatchNormLayer(d.layer_id, c))
            elif isinstance(d, ReLUSpec):
                self.layers.append(ReLULayer())
            elif isinstance(d, MaxPoolSpec) or isinstance(d, AvgPoolSpec):
                ho = _conv_extent(h, d.kernel, d.stride, 0)
                wo = _conv_extent(w, d.kernel, d.stride, 0)
                if ho is None or wo is None:
                    self.fail(type(d).__name__, f"pool k={d.kernel} s={d.stride} does not tile {h}x{w}")
                cls = MaxPoolLayer if isinstance(d, MaxPoolSpec) else AvgPoolLayer
                self.layers.append(cls(type(d).__name__, d.kernel, d.stride))
                h, w = ho, wo
            elif isinstance(d, FlattenSpec):
                self.layers.append(FlattenLayer())
                flat = c * h * w
            elif isinstance(d, LinearSpec):
                if flat is None:
                    self.fail(d.layer_id, "linear before flatten")
                self.layers.append(LinearLayer(d.layer_id, flat, d.out_features, rng=self.rng))
                flat = d.out_features
            else:
                raise ModelSpecError(f"unknown descriptor {d!r}")
        if flat is None:
            raise ModelSpecError(f"{self.spec.name}: network does not end in a flat classifier")
        if flat != self.spec.num_classes:
            raise ModelSpecError(
                f"{self.spec.name}: classifier emits {flat} values for {self.spec.num_classes} classes"
            )
        return Model(self.spec, self.layers, self.searchable, self.costs)


def build_model(
    spec: NetworkSpec,
    mode: str = "search",
    assignments: dict | None = None,
    rng=None,
    default_pool: BitPool | None = None,
    share_weights: bool = True,
    arch_init: float = 0.01,
) -> Model:
    """Instantiate a NetworkSpec.

    ``mode="search"`` builds searchable convs over the candidate pool;
    ``mode="fixed"`` needs ``assignments`` mapping each searchable layer id
    to (weight_bits, activation_bits) and builds single-branch layers.
    """
    b = _Builder(spec, mode, assignments, rng, default_pool, share_weights, arch_init)
    model = b.build()
    if mode == "search" and not model.searchable_layers():
        raise ModelSpecError(f"{spec.name}: search mode needs at least one searchable layer")
    return model


# --------------------------------------------------------------------------
# zoo


def smallcnn_spec(num_classes: int, input_shape=(1, 28, 28)) -> NetworkSpec:
    """Fixed-precision stem, three searchable 3x3 convs, fixed classifier."""
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ModelSpecError(f"smallcnn needs extents divisible by 4, got {input_shape}")
    return NetworkSpec(
        name="smallcnn",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        layers=(
            ConvSpec("stem", 8, 3, 1, 1, searchable=False),
            BNSpec("stem_bn"),
            ReLUSpec(),
            MaxPoolSpec(2, 2),
            ConvSpec("conv1", 16, 3, 1, 1),
            BNSpec("bn1"),
            ConvSpec("conv2", 16, 3, 1, 1),
            BNSpec("bn2"),
            MaxPoolSpec(2, 2),
            ConvSpec("conv3", 32, 3, 1, 1),
            BNSpec("bn3"),
            ReLUSpec(),
            AvgPoolSpec(h // 4, h // 4),
            FlattenSpec(),
            LinearSpec("head", num_classes),
        ),
    )


def resnet_desk_spec(num_classes: int, input_shape=(3, 32, 32)) -> NetworkSpec:
    """Residual desk model: stem + three stages of two blocks + classifier.

    Stages run at (16, 32, 32) channels; stages 2 and 3 downsample at
    entry. The only projection shortcut sits at the stage-2 transition,
    for 13 searchable convs total.
    """
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ModelSpecError(f"resnet-desk needs extents divisible by 4, got {input_shape}")
    return NetworkSpec(
        name="resnet-desk",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        layers=(
            ConvSpec("stem", 16, 3, 1, 1, searchable=False),
            BNSpec("stem_bn"),
            ReLUSpec(),
            ResidualBlockSpec("stage1.block1", 16, 1),
            ResidualBlockSpec("stage1.block2", 16, 1),
            ResidualBlockSpec("stage2.block1", 32, 2),
            ResidualBlockSpec("stage2.block2", 32, 1),
            ResidualBlockSpec("stage3.block1", 32, 2),
            ResidualBlockSpec("stage3.block2", 32, 1),
            ReLUSpec(),
            AvgPoolSpec(h // 4, h // 4),
            FlattenSpec(),
            LinearSpec("head", num_classes),
        ),
    )


ZOO = {"smallcnn": smallcnn_spec, "resnet-desk": resnet_desk_spec}


def zoo_spec(name: str, num_classes: int, input_shape=None) -> NetworkSpec:
    if name not in ZOO:
        raise ModelSpecError(f"unknown zoo model {name!r}; available: {sorted(ZOO)}")
    if input_shape is None:
        return ZOO[name](num_classes)
    return ZOO[name](num_classes, tuple(input_shape))
