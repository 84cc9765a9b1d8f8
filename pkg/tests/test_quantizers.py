"""Quantizer design and application tests.

The design oracle is deliberately independent of the implementation: MSE
is integrated numerically (composite Simpson over a dense grid of inputs,
cells assigned by np.digitize against the thresholds) and the step is
optimized by brute-force grid search.
"""

import math

import numpy as np
import pytest

from mixprec.quantizers import (
    ACTIVATION,
    WEIGHT,
    LloydQuantizer,
    QuantizerError,
    ScaledQuantizer,
    design_unit_gaussian_quantizer,
    export_quantizer_table,
    quantize_activations,
    quantize_weights,
    unit_gaussian_mse,
)
from mixprec.tensor import Tape, Tensor


def _integration_grid(kind):
    """Simpson abscissae and pdf-folded weights over the relevant support."""
    lo, hi, n = (-12.0, 12.0, 24001) if kind == WEIGHT else (0.0, 12.0, 12001)
    x = np.linspace(lo, hi, n)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    return x, w * ((x[1] - x[0]) / 3.0) * pdf


def oracle_mse(kind, levels, thresholds):
    """Numerically integrated unit-Gaussian MSE, independent of the closed form."""
    x, wts = _integration_grid(kind)
    idx = np.digitize(x, thresholds[1:-1])
    return float(np.dot(wts, (x - levels[idx]) ** 2))


def oracle_grid_best_mse(bits, kind, n_grid=10_000):
    """Dense grid search over the step using the numeric-integration MSE."""
    x, wts = _integration_grid(kind)
    n = 2 ** bits
    base = (np.arange(n) - (n - 1) / 2) if kind == WEIGHT else np.arange(n).astype(float)
    best = math.inf
    for s in np.linspace(1e-3, 4.0, n_grid):
        q = base * s
        idx = np.digitize(x, (q[:-1] + q[1:]) / 2)
        m = float(np.dot(wts, (x - q[idx]) ** 2))
        if m < best:
            best = m
    return best


def make_quantizer(kind, levels, step):
    levels = np.asarray(levels, dtype=float)
    t = np.concatenate(([-np.inf], (levels[:-1] + levels[1:]) / 2, [np.inf]))
    return LloydQuantizer(
        bits=int(math.log2(len(levels))), kind=kind, levels=levels,
        thresholds=t, step=step, design_mse=float("nan"),
    )


# --------------------------------------------------------------------------
# design


def test_one_bit_weight_level_is_mean_absolute_gaussian():
    q = design_unit_gaussian_quantizer(1, WEIGHT)
    a = math.sqrt(2 / math.pi)
    assert abs(q.levels[1] - a) < 1e-3
    np.testing.assert_allclose(q.levels, [-a, a], atol=1e-3)
    # brute-force 1-D minimization of E[(x - a*sign(x))^2] = 1 + a^2 - 2aE|x|
    grid = np.linspace(1e-3, 2.0, 200_001)
    brute = grid[np.argmin(1 + grid ** 2 - 2 * grid * a)]
    assert abs(q.levels[1] - brute) < 1e-3


@pytest.mark.parametrize("bits", [1, 2, 3, 4])
@pytest.mark.parametrize("kind", [WEIGHT, ACTIVATION])
def test_design_beats_dense_grid_oracle(bits, kind):
    q = design_unit_gaussian_quantizer(bits, kind)
    assert q.design_mse <= oracle_grid_best_mse(bits, kind) + 1e-6


def test_design_mse_decreases_with_bits():
    for kind in (WEIGHT, ACTIVATION):
        m1 = design_unit_gaussian_quantizer(1, kind).design_mse
        m2 = design_unit_gaussian_quantizer(2, kind).design_mse
        assert m2 < m1


def test_closed_form_matches_numeric_integration():
    for bits in (1, 2, 3, 4):
        for kind in (WEIGHT, ACTIVATION):
            q = design_unit_gaussian_quantizer(bits, kind)
            num = oracle_mse(kind, q.levels, q.thresholds)
            assert abs(unit_gaussian_mse(bits, kind, q.step) - num) < 1e-7


def test_design_rejects_bad_bits_and_kind():
    with pytest.raises(QuantizerError):
        design_unit_gaussian_quantizer(0, WEIGHT)
    with pytest.raises(QuantizerError):
        design_unit_gaussian_quantizer(9, ACTIVATION)
    with pytest.raises(QuantizerError):
        design_unit_gaussian_quantizer(2, "other")


def test_designed_quantizers_satisfy_structural_invariants():
    for bits in range(1, 9):
        for kind in (WEIGHT, ACTIVATION):
            q = design_unit_gaussian_quantizer(bits, kind)
            assert len(q.levels) == 2 ** bits
            d = np.diff(q.levels)
            assert np.all(np.abs(d - q.step) <= 1e-12)
            mids = (q.levels[:-1] + q.levels[1:]) / 2
            assert np.all(np.abs(q.thresholds[1:-1] - mids) <= 1e-12)
            if kind == WEIGHT:
                np.testing.assert_allclose(q.levels, -q.levels[::-1], atol=1e-12)
            else:
                assert q.levels[0] == 0.0 and np.all(q.levels >= 0)


# --------------------------------------------------------------------------
# scalar map semantics


def test_scalar_map_is_nondecreasing():
    rng = np.random.default_rng(0)
    for bits, kind in [(1, WEIGHT), (3, WEIGHT), (2, ACTIVATION), (4, ACTIVATION)]:
        q = design_unit_gaussian_quantizer(bits, kind)
        x = np.sort(rng.standard_normal(5000) * 3)
        y = q.apply(x)
        assert np.all(np.diff(y) >= 0)


def test_weight_map_is_odd_symmetric():
    rng = np.random.default_rng(1)
    for bits in (1, 2, 4):
        q = design_unit_gaussian_quantizer(bits, WEIGHT)
        x = rng.standard_normal(5000) * 2
        np.testing.assert_array_equal(q.apply(-x), -q.apply(x))


def test_apply_matches_digitize_reference():
    rng = np.random.default_rng(2)
    for bits, kind in [(2, WEIGHT), (3, ACTIVATION)]:
        q = design_unit_gaussian_quantizer(bits, kind)
        x = rng.standard_normal(10_000) * 2
        if kind == ACTIVATION:
            ref_in = np.maximum(x, 0.0)
        else:
            ref_in = x
        ref = q.levels[np.digitize(ref_in, q.thresholds[1:-1])]
        np.testing.assert_array_equal(q.apply(x), ref)


def test_threshold_boundary_goes_to_upper_cell():
    # exactly representable step so threshold values are exact
    q = make_quantizer(WEIGHT, [-0.75, -0.25, 0.25, 0.75], 0.5)
    x = np.array([-0.5, 0.0, 0.5])
    np.testing.assert_array_equal(q.apply(x), [-0.25, 0.25, 0.75])
    one = make_quantizer(WEIGHT, [-0.5, 0.5], 1.0)
    assert one.apply(np.array([0.0]))[0] == 0.5  # sign(0) -> positive level


def test_scaled_quantizer_rescales_levels_and_map():
    base = design_unit_gaussian_quantizer(2, WEIGHT)
    sq = ScaledQuantizer(base, 3.0)
    np.testing.assert_allclose(sq.levels, 3.0 * base.levels, rtol=1e-15)
    np.testing.assert_allclose(sq.thresholds[1:-1], 3.0 * base.thresholds[1:-1], rtol=1e-15)
    x = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(sq.apply(x), 3.0 * base.apply(x / 3.0), rtol=1e-15)
    with pytest.raises(QuantizerError):
        ScaledQuantizer(base, 0.0)


# --------------------------------------------------------------------------
# weight quantization op


def test_weight_saturation_to_outer_levels():
    q = design_unit_gaussian_quantizer(1, WEIGHT)
    w = Tensor(np.array([10.0, -10.0]))
    out = quantize_weights(w, q)
    s = float(w.data.std())
    a = q.levels[1]
    np.testing.assert_allclose(out.data, [s * a, -s * a], rtol=1e-12)


def test_weight_degenerate_sigma_zero_output_passthrough_grad():
    q = design_unit_gaussian_quantizer(2, WEIGHT)
    w = Tensor(np.zeros((3, 3)), requires_grad=True)
    with Tape() as tape:
        out = quantize_weights(w, q)
        out.grad = np.full((3, 3), 2.5)
        tape.backward(out)
    assert np.all(out.data == 0.0)
    np.testing.assert_array_equal(w.grad, np.full((3, 3), 2.5))


def test_weight_empirical_mse_tracks_design_mse():
    rng = np.random.default_rng(42)
    q = design_unit_gaussian_quantizer(2, WEIGHT)
    w = rng.standard_normal(1000)
    out = quantize_weights(Tensor(w), q)
    sigma = w.std()
    ratio = np.mean((out.data - w) ** 2) / sigma ** 2
    assert abs(ratio - q.design_mse) / q.design_mse < 0.10


def test_weight_kind_is_checked():
    q = design_unit_gaussian_quantizer(2, ACTIVATION)
    with pytest.raises(QuantizerError):
        quantize_weights(Tensor(np.ones(3)), q)


def test_weight_ste_band_and_exact_passthrough():
    q = design_unit_gaussian_quantizer(2, WEIGHT)
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal(64)
    w = Tensor(w0, requires_grad=True)
    with Tape() as tape:
        out = quantize_weights(w, q)
        g = rng.standard_normal(64)
        out.grad = g.copy()
        tape.backward(out)
    sigma = w0.std()
    band = np.abs(w0) <= sigma * q.levels[-1]
    np.testing.assert_array_equal(w.grad[band], g[band])
    np.testing.assert_array_equal(w.grad[~band], 0.0)


def test_weight_ste_matches_fd_of_clipped_identity():
    # The backward rule is the derivative of clamp(w, +-sigma*q_max); check by FD.
    q = design_unit_gaussian_quantizer(2, WEIGHT)
    rng = np.random.default_rng(4)
    w0 = rng.standard_normal(128)
    sigma = w0.std()
    clip = sigma * q.levels[-1]
    eps = 1e-5
    away = np.abs(np.abs(w0) - clip) > 10 * eps
    fd = (np.clip(w0 + eps, -clip, clip) - np.clip(w0 - eps, -clip, clip)) / (2 * eps)
    w = Tensor(w0, requires_grad=True)
    with Tape() as tape:
        out = quantize_weights(w, q, sigma=sigma)
        out.grad = np.ones(128)
        tape.backward(out)
    np.testing.assert_allclose(w.grad[away], fd[away], atol=1e-9)


def test_weight_idempotent_once_sigma_fixed():
    q = design_unit_gaussian_quantizer(3, WEIGHT)
    rng = np.random.default_rng(5)
    w = rng.standard_normal(500)
    sigma = w.std()
    once = quantize_weights(Tensor(w), q).data
    twice = quantize_weights(Tensor(once), q, sigma=sigma).data
    np.testing.assert_array_equal(once, twice)


# --------------------------------------------------------------------------
# activation quantization op


def test_activation_nonpositive_input_zero_output_zero_grad():
    q = design_unit_gaussian_quantizer(2, ACTIVATION)
    x = Tensor(np.array([-3.0, -0.1, 0.0]), requires_grad=True)
    with Tape() as tape:
        out = quantize_activations(x, q)
        out.grad = np.ones(3)
        tape.backward(out)
    np.testing.assert_array_equal(out.data, 0.0)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_activation_saturation_clips_value_and_grad():
    q = design_unit_gaussian_quantizer(2, ACTIVATION)
    x = Tensor(np.array([q.q_max + 10.0]), requires_grad=True)
    with Tape() as tape:
        out = quantize_activations(x, q)
        out.grad = np.ones(1)
        tape.backward(out)
    assert out.data[0] == q.q_max
    assert x.grad[0] == 0.0


def test_activation_mean_matches_scalar_loop_oracle():
    q = design_unit_gaussian_quantizer(2, ACTIVATION)
    rng = np.random.default_rng(6)
    x = np.abs(rng.standard_normal(4000))
    out = quantize_activations(Tensor(x), q)

    def scalar_quant(v):
        if v <= 0:
            return 0.0
        best, dist = 0.0, abs(v)
        for lvl in q.levels:
            if abs(v - lvl) < dist or (abs(v - lvl) == dist and lvl > best):
                best, dist = lvl, abs(v - lvl)
        return best

    ideal = np.array([scalar_quant(v) for v in x])
    assert abs(out.data.mean() - ideal.mean()) / ideal.mean() < 0.05


def test_activation_idempotent_bit_exact():
    q = design_unit_gaussian_quantizer(3, ACTIVATION)
    rng = np.random.default_rng(7)
    x = rng.standard_normal(1000) * 2
    once = quantize_activations(Tensor(x), q).data
    twice = quantize_activations(Tensor(once), q).data
    np.testing.assert_array_equal(once, twice)


def test_activation_ste_band_exact_passthrough():
    q = design_unit_gaussian_quantizer(3, ACTIVATION)
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal(256) * 2
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = quantize_activations(x, q)
        g = rng.standard_normal(256)
        out.grad = g.copy()
        tape.backward(out)
    band = (x0 > 0) & (x0 <= q.q_max + q.step / 2)
    np.testing.assert_array_equal(x.grad[band], g[band])
    np.testing.assert_array_equal(x.grad[~band], 0.0)


def test_activation_ste_matches_fd_of_clipped_relu():
    q = design_unit_gaussian_quantizer(2, ACTIVATION)
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal(128) * 2
    hi = q.q_max + q.step / 2
    eps = 1e-5
    away = (np.abs(x0) > 10 * eps) & (np.abs(x0 - hi) > 10 * eps)
    fd = (np.clip(x0 + eps, 0, hi) - np.clip(x0 - eps, 0, hi)) / (2 * eps)
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = quantize_activations(x, q)
        out.grad = np.ones(128)
        tape.backward(out)
    np.testing.assert_allclose(x.grad[away], fd[away], atol=1e-9)


def test_activation_kind_is_checked():
    q = design_unit_gaussian_quantizer(2, WEIGHT)
    with pytest.raises(QuantizerError):
        quantize_activations(Tensor(np.ones(3)), q)


# --------------------------------------------------------------------------
# export


def test_export_quantizer_table(tmp_path):
    path = tmp_path / "quant.csv"
    qs = [design_unit_gaussian_quantizer(1, WEIGHT), design_unit_gaussian_quantizer(2, ACTIVATION)]
    export_quantizer_table(path, qs)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "schema,quantizer_table_v1"
    assert lines[1] == "bits,kind,index,level,threshold"
    assert len(lines) == 2 + 2 + 4
    first = lines[2].split(",")
    assert first[0] == "1" and first[1] == WEIGHT and first[4] == "-inf"
