"""FLOPs/BitOps cost model, its expected-value relaxation over branch
probabilities, and the penalized training objective.

Costs are geometric: a filter of cardinality |f| sliding over a w x h
input at stride s costs |f|*w*h/s^2 operation pairs; in bit arithmetic
this is scaled by the product of the weight and activation bit-widths.
The relaxed search replaces the discrete bit-widths by their expectations
under the branch probabilities, which keeps the penalty linear in each
probability vector. All network costs are reported relative to the first
searchable layer's FLOPs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, dot_const, softmax_vec


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class FilterCost:
    """Geometric cost inputs for one filter."""

    cardinality: int      # number of weights
    input_width: int
    input_height: int
    stride: int = 1

    def __post_init__(self):
        for name in ("cardinality", "input_width", "input_height", "stride"):
            if getattr(self, name) <= 0:
                raise CostError(f"FilterCost.{name} must be positive")


def flops(fc: FilterCost) -> float:
    return fc.cardinality * fc.input_width * fc.input_height / fc.stride ** 2


def bitops(fc: FilterCost, b_f: float, b_a: float) -> float:
    if b_f < 1 or b_a < 1:
        raise CostError(f"bit-widths must be >= 1, got ({b_f}, {b_a})")
    return b_f * b_a * flops(fc)


def expected_bits(pi, pool_bits) -> float:
    """Mean bit-width under branch probabilities: sum_i pi_i * b_i."""
    pi = np.asarray(pi, dtype=float)
    bits = np.asarray(pool_bits, dtype=float)
    if pi.shape != bits.shape:
        raise CostError(f"probability vector {pi.shape} vs pool {bits.shape}")
    return float(np.dot(pi, bits))


def expected_cost(fc: FilterCost, pi_alpha, pi_beta, pool) -> float:
    """Relaxed filter cost E[b_f] * E[b_a] * flops."""
    ebf = expected_bits(pi_alpha, pool.weight_bits)
    eba = expected_bits(pi_beta, pool.activation_bits)
    return ebf * eba * flops(fc)


def lagrangian(r_e, r_c, eta):
    """Penalized objective r_e + eta * r_c (works on floats and tensors)."""
    if eta < 0:
        raise CostError(f"eta must be nonnegative, got {eta}")
    return r_e + eta * r_c


@dataclass
class ComplexityModel:
    """Per-layer costs plus the normalization constant and the multiplier.

    ``costs`` maps searchable layer ids to their FilterCost in network
    order; the normalizer is the plain FLOPs of the first searchable
    layer, so that layer's normalized cost at 1-bit/1-bit is exactly 1.
    ``budget_gamma`` is carried for documentation only.
    """

    eta: float
    costs: dict = field(default_factory=dict)
    normalizer: float = 0.0
    budget_gamma: float | None = None

    @classmethod
    def from_costs(cls, costs: dict, eta: float, budget_gamma: float | None = None):
        if eta < 0:
            raise CostError(f"eta must be nonnegative, got {eta}")
        if not costs:
            raise CostError("need at least one searchable layer")
        first = next(iter(costs.values()))
        return cls(eta=eta, costs=dict(costs), normalizer=flops(first), budget_gamma=budget_gamma)

    def network_cost(self, arch_state) -> float:
        """Normalized relaxed network cost from (layer_id, pi_alpha, pi_beta, pool) tuples."""
        total = 0.0
        for layer_id, pi_a, pi_b, pool in arch_state:
            total += expected_cost(self.costs[layer_id], pi_a, pi_b, pool)
        return total / self.normalizer

    def network_cost_tensor(self, layers) -> Tensor:
        """Differentiable normalized cost over searchable layers (alpha/beta tensors)."""
        total = None
        for layer in layers:
            fc = self.costs[layer.layer_id]
            ebf = dot_const(softmax_vec(layer.alpha), np.asarray(layer.pool.weight_bits, dtype=float))
            eba = dot_const(softmax_vec(layer.beta), np.asarray(layer.pool.activation_bits, dtype=float))
            term = ebf * eba * (flops(fc) / self.normalizer)
            total = term if total is None else total + term
        if total is None:
            raise CostError("need at least one searchable layer")
        return total

    def discrete_bitops(self, assignments) -> float:
        """Total BitOps of discrete (layer_id -> (weight_bits, act_bits)) assignments."""
        return sum(bitops(self.costs[lid], wb, ab) for lid, (wb, ab) in assignments.items())

    def layer_report_rows(self, arch_state):
        rows = []
        for layer_id, pi_a, pi_b, pool in arch_state:
            fc = self.costs[layer_id]
            ebf = expected_bits(pi_a, pool.weight_bits)
            eba = expected_bits(pi_b, pool.activation_bits)
            cost = ebf * eba * flops(fc)
            rows.append(
                {
                    "layer_id": layer_id,
                    "flops": flops(fc),
                    "E_bf": ebf,
                    "E_ba": eba,
                    "expected_cost": cost,
                    "normalized_cost": cost / self.normalizer,
                }
            )
        return rows


def write_cost_report(path, rows) -> None:
    """CSV cost report: layer_id,flops,E_bf,E_ba,expected_cost,normalized_cost."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["schema", "cost_report_v1"])
        w.writerow(["layer_id", "flops", "E_bf", "E_ba", "expected_cost", "normalized_cost"])
        for r in rows:
            w.writerow(
                [
                    r["layer_id"],
                    repr(float(r["flops"])),
                    repr(float(r["E_bf"])),
                    repr(float(r["E_ba"])),
                    repr(float(r["expected_cost"])),
                    repr(float(r["normalized_cost"])),
                ]
            )
