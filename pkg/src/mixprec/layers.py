"""Network layers: plain full-precision blocks and the searchable
mixed-precision convolution.

A searchable convolution carries one weight tensor (or one per branch in
unshared mode), a pool of candidate bit-widths, and two logit vectors
whose softmaxes weight the quantized branches. The branch mixture is
collapsed into a single composite weight tensor so each forward pass
costs exactly one convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quantizers import (
    ACTIVATION,
    WEIGHT,
    design_unit_gaussian_quantizer,
    quantize_activations,
    quantize_weights,
)
from .tensor import (
    BNState,
    Tensor,
    avg_pool2d,
    batch_norm,
    conv2d,
    flatten,
    linear,
    max_pool2d,
    relu,
    softmax_vec,
    weighted_sum,
)


class LayerError(ValueError):
    pass


@dataclass(frozen=True)
class BitPool:
    """Candidate bit-widths for weights and activations of one filter."""

    weight_bits: tuple = (1, 2, 3, 4)
    activation_bits: tuple = (2, 3, 4)

    def __post_init__(self):
        for name, bits in (("weight_bits", self.weight_bits), ("activation_bits", self.activation_bits)):
            bits = tuple(bits)
            object.__setattr__(self, name, bits)
            if not bits:
                raise LayerError(f"{name} must be nonempty")
            if any(not isinstance(b, int) or not 1 <= b <= 8 for b in bits):
                raise LayerError(f"{name} entries must be integers in [1, 8], got {bits}")
            if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
                raise LayerError(f"{name} must be strictly increasing, got {bits}")


def arch_probs(logits) -> np.ndarray:
    """Stable softmax of an architecture logit vector (pure, for logging)."""
    z = np.asarray(getattr(logits, "data", logits), dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise LayerError(f"arch_probs needs a nonempty 1-D vector, got shape {z.shape}")
    e = np.exp(z - z.max())
    return e / e.sum()


def composite_activation(x: Tensor, beta: Tensor, pool: BitPool, quantizers) -> Tensor:
    """Softmax-weighted sum of the half-wave quantized branches of x."""
    if len(quantizers) != len(pool.activation_bits):
        raise LayerError(
            f"{len(quantizers)} activation quantizers for pool {pool.activation_bits}"
        )
    if beta.size != len(quantizers):
        raise LayerError(f"beta has {beta.size} logits for {len(quantizers)} branches")
    pb = softmax_vec(beta)
    return weighted_sum(pb, [quantize_activations(x, q) for q in quantizers])


def composite_weight(layer: "MpsConvLayer", quantizers=None) -> Tensor:
    """Softmax-weighted mixture of the quantized weight branches."""
    qs = tuple(quantizers) if quantizers is not None else layer.weight_quantizers
    if len(qs) != layer.alpha.size:
        raise LayerError(f"{len(qs)} weight quantizers for {layer.alpha.size} logits")
    if layer.share_weights:
        if layer.weight is None:
            raise LayerError("shared mode requires the universal weight tensor")
        terms = [quantize_weights(layer.weight, q) for q in qs]
    else:
        if layer.weights is None or len(layer.weights) != len(qs):
            raise LayerError("unshared mode requires one weight tensor per branch")
        terms = [quantize_weights(w, q) for w, q in zip(layer.weights, qs)]
    return weighted_sum(softmax_vec(layer.alpha), terms)


class Layer:
    """Minimal layer interface; parameters are grouped by optimizer policy."""

    layer_id = ""

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def params_weight(self):
        return []

    def params_other(self):
        return []

    def params_arch(self):
        return []

    def state_arrays(self):
        return {}


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2dLayer(Layer):
    """Plain full-precision convolution (no bias; batch norm follows)."""

    def __init__(self, layer_id, in_channels, out_channels, kernel, stride=1, pad=0, rng=None):
        self.layer_id = layer_id
        self.stride, self.pad = stride, pad
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight = Tensor(
            _he_normal(rng, shape, in_channels * kernel * kernel),
            requires_grad=True,
            name=f"{layer_id}.w",
        )

    def forward(self, x, training):
        return conv2d(x, self.weight, self.stride, self.pad)

    def params_weight(self):
        return [self.weight]

    def state_arrays(self):
        return {self.weight.name: self.weight}


class LinearLayer(Layer):
    def __init__(self, layer_id, in_features, out_features, rng=None):
        self.layer_id = layer_id
        self.weight = Tensor(
            _he_normal(rng, (out_features, in_features), in_features),
            requires_grad=True,
            name=f"{layer_id}.w",
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{layer_id}.b")

    def forward(self, x, training):
        return linear(x, self.weight, self.bias)

    def params_weight(self):
        return [self.weight]

    def params_other(self):
        return [self.bias]

    def state_arrays(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class BatchNormLayer(Layer):
    def __init__(self, layer_id, channels, momentum=0.1, eps=1e-5):
        self.layer_id = layer_id
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{layer_id}.gamma")
        self.shift = Tensor(np.zeros(channels), requires_grad=True, name=f"{layer_id}.shift")
        self.state = BNState(channels, momentum=momentum, eps=eps)

    def forward(self, x, training):
        return batch_norm(x, self.gamma, self.shift, self.state, training)

    def params_other(self):
        return [self.gamma, self.shift]

    def state_arrays(self):
        return {
            self.gamma.name: self.gamma,
            self.shift.name: self.shift,
            f"{self.layer_id}.running_mean": self.state.running_mean,
            f"{self.layer_id}.running_var": self.state.running_var,
        }


class ReLULayer(Layer):
    def __init__(self, layer_id=""):
        self.layer_id = layer_id

    def forward(self, x, training):
        return relu(x)


class MaxPoolLayer(Layer):
    def __init__(self, layer_id, kernel, stride):
        self.layer_id = layer_id
        self.kernel, self.stride = kernel, stride

    def forward(self, x, training):
        return max_pool2d(x, self.kernel, self.stride)


class AvgPoolLayer(Layer):
    def __init__(self, layer_id, kernel, stride):
        self.layer_id = layer_id
        self.kernel, self.stride = kernel, stride

    def forward(self, x, training):
        return avg_pool2d(x, self.kernel, self.stride)


class FlattenLayer(Layer):
    def forward(self, x, training):
        return flatten(x)


class MpsConvLayer(Layer):
    """Searchable convolution: composite activation in, composite weight through.

    ``share_weights=True`` keeps one universal weight tensor quantized by
    every branch; ``False`` gives each weight branch its own tensor.
    Architecture logits alpha (weights) and beta (activations) are plain
    tensors updated by the search optimizer.
    """

    def __init__(
        self,
        layer_id,
        in_channels,
        out_channels,
        kernel,
        stride=1,
        pad=0,
        pool: BitPool | None = None,
        rng=None,
        share_weights=True,
        arch_init=0.01,
    ):
        self.layer_id = layer_id
        self.pool = pool if pool is not None else BitPool()
        self.stride, self.pad = stride, pad
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.share_weights = share_weights
        shape = (out_channels, in_channels, kernel, kernel)
        fan_in = in_channels * kernel * kernel
        n_f = len(self.pool.weight_bits)
        n_a = len(self.pool.activation_bits)
        if share_weights:
            self.weight = Tensor(_he_normal(rng, shape, fan_in), requires_grad=True, name=f"{layer_id}.w")
            self.weights = None
        else:
            self.weight = None
            self.weights = [
                Tensor(_he_normal(rng, shape, fan_in), requires_grad=True, name=f"{layer_id}.w{i}")
                for i in range(n_f)
            ]
        self.alpha = Tensor(np.full(n_f, float(arch_init)), requires_grad=True, name=f"{layer_id}.alpha")
        self.beta = Tensor(np.full(n_a, float(arch_init)), requires_grad=True, name=f"{layer_id}.beta")
        self.weight_quantizers = tuple(
            design_unit_gaussian_quantizer(b, WEIGHT) for b in self.pool.weight_bits
        )
        self.act_quantizers = tuple(
            design_unit_gaussian_quantizer(b, ACTIVATION) for b in self.pool.activation_bits
        )

    @property
    def filter_cardinality(self) -> int:
        return self.out_channels * self.in_channels * self.kernel * self.kernel

    def pi_alpha(self) -> np.ndarray:
        return arch_probs(self.alpha)

    def pi_beta(self) -> np.ndarray:
        return arch_probs(self.beta)

    def forward(self, x, training=True):
        abar = composite_activation(x, self.beta, self.pool, self.act_quantizers)
        wbar = composite_weight(self)
        return conv2d(abar, wbar, self.stride, self.pad)

    def parallel_forward_reference(self, x, coeffs=None):
        """All-branch reference: one convolution per weight branch, then the
        weighted sum. Test oracle for the composite identity; ``coeffs``
        optionally overrides the softmax weights (may be unnormalized)."""
        abar = composite_activation(x, self.beta, self.pool, self.act_quantizers)
        ws = [self.weight] * len(self.weight_quantizers) if self.share_weights else self.weights
        ys = [
            conv2d(abar, quantize_weights(w, q), self.stride, self.pad)
            for w, q in zip(ws, self.weight_quantizers)
        ]
        if coeffs is None:
            c = softmax_vec(self.alpha)
        elif isinstance(coeffs, Tensor):
            c = coeffs
        else:
            c = Tensor(np.asarray(coeffs, dtype=float))
        return weighted_sum(c, ys)

    def params_weight(self):
        return [self.weight] if self.share_weights else list(self.weights)

    def params_arch(self):
        return [self.alpha, self.beta]

    def state_arrays(self):
        out = {}
        for w in self.params_weight():
            out[w.name] = w
        out[self.alpha.name] = self.alpha
        out[self.beta.name] = self.beta
        return out


class ResidualBlock(Layer):
    """Two searchable 3x3 convolutions with an additive shortcut.

    Downsampling blocks halve the spatial extent with a 2x2 average pool
    at entry (shared by the main and shortcut paths); a projection
    shortcut (1x1 conv + BN) is inserted when the channel count changes
    or after downsampling.
    """

    def __init__(self, layer_id, entry_pool, conv1, bn1, conv2, bn2, shortcut_conv=None, shortcut_bn=None):
        self.layer_id = layer_id
        self.entry_pool = entry_pool
        self.conv1, self.bn1 = conv1, bn1
        self.conv2, self.bn2 = conv2, bn2
        self.shortcut_conv, self.shortcut_bn = shortcut_conv, shortcut_bn

    def sublayers(self):
        subs = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.shortcut_conv is not None:
            subs += [self.shortcut_conv, self.shortcut_bn]
        return subs

    def forward(self, x, training):
        x0 = self.entry_pool.forward(x, training) if self.entry_pool is not None else x
        h = self.bn1.forward(self.conv1.forward(x0, training), training)
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        if self.shortcut_conv is not None:
            sc = self.shortcut_bn.forward(self.shortcut_conv.forward(x0, training), training)
        else:
            sc = x0
        return h + sc

    def params_weight(self):
        return [p for s in self.sublayers() for p in s.params_weight()]

    def params_other(self):
        return [p for s in self.sublayers() for p in s.params_other()]

    def params_arch(self):
        return [p for s in self.sublayers() for p in s.params_arch()]

    def state_arrays(self):
        out = {}
        for s in self.sublayers():
            out.update(s.state_arrays())
        return out
