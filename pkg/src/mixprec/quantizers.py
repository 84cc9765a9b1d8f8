"""Uniform-step scalar quantizers designed for the unit Gaussian.

Weight quantizers are symmetric about zero and applied after rescaling by
the tensor's standard deviation; activation quantizers are non-negative
with a zero level and act as a half-wave clipped staircase. Both carry
straight-through backward rules when applied to tensors.

Design minimizes E[(x - Q(x))^2] under N(0, 1) over the single step
parameter by golden-section search; the expectation is evaluated exactly
per quantization cell from Gaussian moment integrals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, _record, _recording

WEIGHT = "weight"
ACTIVATION = "activation"

_SIGMA_FLOOR = 1e-12
_STEP_LO, _STEP_HI = 1e-3, 4.0


class QuantizerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LloydQuantizer:
    """Precomputed uniform-step quantizer for the unit Gaussian.

    ``levels`` are the 2^bits representative values (sorted), ``thresholds``
    the cell boundaries including the -inf/+inf sentinels, ``step`` the
    uniform level spacing, ``design_mse`` the achieved unit-Gaussian MSE.
    A value exactly on a threshold belongs to the upper cell.
    """

    bits: int
    kind: str
    levels: np.ndarray
    thresholds: np.ndarray
    step: float
    design_mse: float

    def __post_init__(self):
        q, t = self.levels, self.thresholds
        if q.ndim != 1 or len(t) != len(q) + 1:
            raise QuantizerError("levels/thresholds lengths are inconsistent")
        if not (np.isneginf(t[0]) and np.isposinf(t[-1])):
            raise QuantizerError("outer thresholds must be -inf/+inf")
        d = np.diff(q)
        if len(d) and (d <= 0).any():
            raise QuantizerError("levels must be strictly increasing")
        if len(d) and np.abs(d - self.step).max() > 1e-12:
            raise QuantizerError("levels must be uniformly spaced")
        mids = (q[:-1] + q[1:]) / 2
        if len(mids) and np.abs(t[1:-1] - mids).max() > 1e-12:
            raise QuantizerError("thresholds must be level midpoints")
        if self.kind == WEIGHT:
            if np.abs(q + q[::-1]).max() > 1e-12:
                raise QuantizerError("weight levels must be symmetric about 0")
        elif self.kind == ACTIVATION:
            if q[0] != 0.0 or (q < 0).any():
                raise QuantizerError("activation levels must be non-negative with q_0 = 0")
        else:
            raise QuantizerError(f"unknown quantizer kind {self.kind!r}")

    @property
    def q_max(self) -> float:
        return float(self.levels[-1])

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        """Level index per entry; thresholds round up, outer cells saturate."""
        n = len(self.levels)
        if self.kind == WEIGHT:
            # levels are (i - (n-1)/2) * step
            raw = np.floor(x / self.step + n / 2.0)
        else:
            raw = np.floor(x / self.step + 0.5)
        return np.clip(raw, 0, n - 1).astype(np.int64)

    def apply(self, x: np.ndarray) -> np.ndarray:
        # arithmetic reconstruction of levels[cell_index(x)]: the level
        # formulas below are the exact expressions the layouts were built
        # from, so results are bit-identical to the table lookup
        n = len(self.levels)
        if self.kind == WEIGHT:
            idx = np.clip(np.floor(x / self.step + n / 2.0), 0, n - 1)
            return (idx - (n - 1) / 2.0) * self.step
        idx = np.clip(np.floor(x / self.step + 0.5), 0, n - 1)
        return idx * self.step


@dataclass(frozen=True, eq=False)
class ScaledQuantizer:
    """A unit-Gaussian quantizer rescaled to a tensor's spread: sigma * Q(x / sigma)."""

    base: LloydQuantizer
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise QuantizerError(f"sigma must be positive, got {self.sigma}")

    @property
    def levels(self) -> np.ndarray:
        return self.sigma * self.base.levels

    @property
    def thresholds(self) -> np.ndarray:
        return self.sigma * self.base.thresholds

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.sigma * self.base.apply(x / self.sigma)


# --------------------------------------------------------------------------
# design


def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def _cdf(x: float) -> float:
    if x == math.inf:
        return 1.0
    if x == -math.inf:
        return 0.0
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _cell_sqerr(q: float, lo: float, hi: float) -> float:
    """integral over (lo, hi) of (x - q)^2 dPhi(x), with infinite edges allowed."""
    lo_phi = 0.0 if math.isinf(lo) else _phi(lo)
    hi_phi = 0.0 if math.isinf(hi) else _phi(hi)
    lo_xphi = 0.0 if math.isinf(lo) else lo * lo_phi
    hi_xphi = 0.0 if math.isinf(hi) else hi * hi_phi
    dcdf = _cdf(hi) - _cdf(lo)
    return (1.0 + q * q) * dcdf - (hi_xphi - lo_xphi) + 2.0 * q * (hi_phi - lo_phi)


def _weight_layout(bits: int, step: float):
    n = 2 ** bits
    q = (np.arange(n) - (n - 1) / 2.0) * step
    t = np.concatenate(([-math.inf], (q[:-1] + q[1:]) / 2.0, [math.inf]))
    return q, t


def _activation_layout(bits: int, step: float):
    n = 2 ** bits
    q = np.arange(n) * step
    t = np.concatenate(([-math.inf], (q[:-1] + q[1:]) / 2.0, [math.inf]))
    return q, t


def unit_gaussian_mse(bits: int, kind: str, step: float) -> float:
    """Exact unit-Gaussian reconstruction MSE of the uniform quantizer."""
    if kind == WEIGHT:
        q, t = _weight_layout(bits, step)
        lo = list(t)
    else:
        q, t = _activation_layout(bits, step)
        # half-wave input: everything at or below 0 lands exactly on the 0 level
        lo = [0.0] + list(t[1:])
    return sum(_cell_sqerr(float(q[i]), lo[i], lo[i + 1]) for i in range(len(q)))


def _golden_min(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


@lru_cache(maxsize=None)
def design_unit_gaussian_quantizer(bits: int, kind: str) -> LloydQuantizer:
    """MSE-optimal uniform-step quantizer for N(0, 1), per kind.

    Weight kind: 2^bits symmetric levels. Activation kind: 2^bits
    non-negative levels including zero, for half-wave inputs. The step is
    found by golden-section search on [1e-3, 4] after a coarse bracketing
    scan.
    """
    if not isinstance(bits, int) or not 1 <= bits <= 8:
        raise QuantizerError(f"bits must be an integer in [1, 8], got {bits!r}")
    if kind not in (WEIGHT, ACTIVATION):
        raise QuantizerError(f"unknown quantizer kind {kind!r}")

    def mse(step):
        return unit_gaussian_mse(bits, kind, step)

    grid = np.linspace(_STEP_LO, _STEP_HI, 129)
    best = int(np.argmin([mse(s) for s in grid]))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    step = _golden_min(mse, lo, hi)
    layout = _weight_layout if kind == WEIGHT else _activation_layout
    q, t = layout(bits, step)
    return LloydQuantizer(
        bits=bits, kind=kind, levels=q, thresholds=t, step=step, design_mse=mse(step)
    )


# --------------------------------------------------------------------------
# tensor ops with straight-through backward rules


def quantize_weights(w: Tensor, q: LloydQuantizer, sigma: float | None = None) -> Tensor:
    """Symmetric quantization of a weight tensor, rescaled by its std.

    Backward passes the upstream gradient through unchanged inside the
    non-saturated band |w| <= sigma * q_max and blocks it outside.
    ``sigma`` is normally estimated from the tensor (population form);
    passing it explicitly freezes the scale.
    """
    if q.kind != WEIGHT:
        raise QuantizerError(f"quantize_weights needs a weight quantizer, got kind {q.kind!r}")
    s = float(w.data.std()) if sigma is None else float(sigma)
    if s < _SIGMA_FLOOR:
        out_data = np.zeros_like(w.data)
        mask = True
    else:
        out_data = ScaledQuantizer(q, s).apply(w.data)
        # pass-through band: outermost finite threshold extended by step/2
        t_clip = s * (q.thresholds[-2] + q.step / 2.0)
        mask = np.abs(w.data) <= t_clip
    out = Tensor(out_data, requires_grad=w.requires_grad)
    if _recording(w):
        def rule(g):
            w._accum(g * mask if mask is not True else g)
        _record(out, rule)
    return out


def quantize_activations(x: Tensor, q: LloydQuantizer) -> Tensor:
    """Half-wave quantization: negatives to zero, positives to the nearest
    level with saturation at the top level.

    Backward is the clipped-ReLU straight-through rule: the gradient passes
    for x in (0, q_max + step/2] and is zero elsewhere.
    """
    if q.kind != ACTIVATION:
        raise QuantizerError(
            f"quantize_activations needs an activation quantizer, got kind {q.kind!r}"
        )
    out = Tensor(q.apply(x.data), requires_grad=x.requires_grad)
    if _recording(x):
        mask = (x.data > 0) & (x.data <= q.q_max + q.step / 2.0)
        def rule(g):
            x._accum(g * mask)
        _record(out, rule)
    return out


# --------------------------------------------------------------------------
# audit export


def export_quantizer_table(path, quantizers) -> None:
    """CSV audit dump: bits,kind,index,level,threshold (lower cell edge)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["schema", "quantizer_table_v1"])
        writer.writerow(["bits", "kind", "index", "level", "threshold"])
        for q in quantizers:
            for i, (level, thr) in enumerate(zip(q.levels, q.thresholds[:-1])):
                writer.writerow([q.bits, q.kind, i, repr(float(level)), repr(float(thr))])
