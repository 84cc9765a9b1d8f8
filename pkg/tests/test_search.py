"""Search loop, discretization, retraining, and sensitivity tests."""

import numpy as np
import pytest

from mixprec.complexity import bitops, flops
from mixprec.data import DatasetSpec, load_dataset
from mixprec.layers import BitPool
from mixprec.models import (
    AvgPoolSpec,
    BNSpec,
    ConvSpec,
    FlattenSpec,
    LinearSpec,
    NetworkSpec,
    ReLUSpec,
    build_model,
)
from mixprec.search import (
    Architecture,
    EvolutionLog,
    NumericalAbort,
    RetrainConfig,
    SearchConfig,
    SearchError,
    discretize_sample,
    discretize_wta,
    evaluate,
    retrain,
    search,
    sensitivity_probe,
    uniform_architecture,
)
from mixprec.tensor import Tensor


def mini_spec(classes=3, pool=None):
    return NetworkSpec(
        name="mini",
        input_shape=(1, 8, 8),
        num_classes=classes,
        layers=(
            ConvSpec("c1", 4, 3, 1, 1, pool=pool),
            BNSpec("b1"),
            ConvSpec("c2", 4, 3, 1, 1, pool=pool),
            BNSpec("b2"),
            ReLUSpec(),
            AvgPoolSpec(8, 8),
            FlattenSpec(),
            LinearSpec("head", classes),
        ),
    )


def mini_dataset(classes=3, samples=96, seed=5):
    return load_dataset(
        DatasetSpec(source="synthetic", classes=classes, dims=(1, 8, 8), samples=samples, seed=seed)
    )


def one_layer_model(wpool, apool):
    spec = NetworkSpec(
        name="one",
        input_shape=(1, 8, 8),
        num_classes=2,
        layers=(
            ConvSpec("only", 2, 3, 1, 1, pool=BitPool(wpool, apool)),
            BNSpec("b"),
            ReLUSpec(),
            FlattenSpec(),
            LinearSpec("head", 2),
        ),
    )
    return build_model(spec, rng=np.random.default_rng(0))


def set_pi(layer, pi_alpha=None, pi_beta=None):
    if pi_alpha is not None:
        layer.alpha.data = np.log(np.asarray(pi_alpha, dtype=float))
    if pi_beta is not None:
        layer.beta.data = np.log(np.asarray(pi_beta, dtype=float))


# --------------------------------------------------------------------------
# config validation


def test_search_config_validation():
    with pytest.raises(SearchError):
        SearchConfig(eta=-1.0)
    with pytest.raises(SearchError):
        SearchConfig(mode="two_level")
    with pytest.raises(SearchError):
        SearchConfig(batch_size=1)
    with pytest.raises(SearchError):
        RetrainConfig(epochs=0)


# --------------------------------------------------------------------------
# discretization


def test_wta_picks_max_probability():
    model = one_layer_model((2, 3, 4), (2, 3))
    layer = model.searchable_layers()[0]
    set_pi(layer, pi_alpha=[0.1, 0.6, 0.3], pi_beta=[0.2, 0.8])
    arch = discretize_wta(model)
    assert arch.entries[0].weight_bits == 3
    assert arch.entries[0].activation_bits == 3


def test_wta_tie_breaks_to_lower_bits():
    model = one_layer_model((2, 3), (2, 3))
    layer = model.searchable_layers()[0]
    set_pi(layer, pi_alpha=[0.5, 0.5], pi_beta=[0.5, 0.5])
    arch = discretize_wta(model)
    assert arch.entries[0].weight_bits == 2
    assert arch.entries[0].activation_bits == 2


def test_wta_invariant_to_logit_shift():
    model = one_layer_model((1, 2, 3, 4), (2, 3, 4))
    layer = model.searchable_layers()[0]
    layer.alpha.data = np.array([0.3, -0.1, 0.9, 0.2])
    layer.beta.data = np.array([0.5, 0.1, -0.4])
    a1 = discretize_wta(model)
    layer.alpha.data = layer.alpha.data + 100.0
    layer.beta.data = layer.beta.data - 55.0
    a2 = discretize_wta(model)
    assert a1.as_assignments() == a2.as_assignments()


def test_sample_one_hot_is_deterministic():
    model = one_layer_model((2, 3, 4), (2, 4))
    layer = model.searchable_layers()[0]
    set_pi(layer, pi_alpha=[1e-12, 1.0, 1e-12], pi_beta=[1.0, 1e-12])
    for n in (1, 7, 50):
        for seed in range(5):
            arch = discretize_sample(model, n, seed)
            assert arch.entries[0].weight_bits == 3
            assert arch.entries[0].activation_bits == 2


def test_sample_single_trial_concentration():
    # pi = [0.5, 0.5]: over 1e4 seeded draws each side lands 50% +- 2%
    model = one_layer_model((2, 3), (2, 3))
    layer = model.searchable_layers()[0]
    set_pi(layer, pi_alpha=[0.5, 0.5], pi_beta=[0.5, 0.5])
    draws = 10_000
    low = 0
    for seed in range(draws):
        arch = discretize_sample(model, 1, seed)
        low += arch.entries[0].weight_bits == 2
    assert abs(low / draws - 0.5) < 0.02


def test_sample_many_trials_matches_wta_on_clear_margins():
    model = one_layer_model((1, 2, 3, 4), (2, 3, 4))
    layer = model.searchable_layers()[0]
    rng = np.random.default_rng(3)
    for trial in range(20):
        pa = rng.dirichlet(np.ones(4))
        pb = rng.dirichlet(np.ones(3))
        set_pi(layer, pi_alpha=pa, pi_beta=pb)
        wta = discretize_wta(model).entries[0]
        sampled = discretize_sample(model, 10_000, seed=trial).entries[0]
        sa = np.sort(pa)
        sb = np.sort(pb)
        if sa[-1] - sa[-2] > 0.1:
            assert sampled.weight_bits == wta.weight_bits
        if sb[-1] - sb[-2] > 0.1:
            assert sampled.activation_bits == wta.activation_bits


def test_sample_rejects_bad_trials():
    model = one_layer_model((2, 3), (2, 3))
    with pytest.raises(SearchError):
        discretize_sample(model, 0, 0)


# --------------------------------------------------------------------------
# architecture files


def test_architecture_json_round_trip(tmp_path):
    model = one_layer_model((2, 3, 4), (2, 3))
    arch = uniform_architecture(model, 2, 3)
    path = tmp_path / "arch.json"
    arch.save(path)
    loaded = Architecture.load(path)
    assert loaded.as_assignments() == arch.as_assignments()
    assert loaded.total_bitops == arch.total_bitops
    assert loaded.normalizer == arch.normalizer
    assert loaded.is_uniform()


def test_architecture_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "architecture_v1", "layers": [], "surprise": 1}')
    with pytest.raises(SearchError, match="surprise"):
        Architecture.load(path)
    path.write_text('{"schema": "other", "layers": []}')
    with pytest.raises(SearchError, match="schema"):
        Architecture.load(path)


# --------------------------------------------------------------------------
# search loop


def run_search(seed=0, epochs=3, mode="single_pass", eta=0.01, classes=3):
    ds = mini_dataset(classes=classes)
    model = build_model(mini_spec(classes), rng=np.random.default_rng(seed))
    cfg = SearchConfig(eta=eta, epochs=epochs, seed=seed, batch_size=32, mode=mode)
    log = search(model, ds, cfg)
    return model, log


def test_search_log_row_count_invariant():
    model, log = run_search(epochs=4)
    n_layers = len(model.searchable_layers())
    assert len(log.pi_rows) == 4 * n_layers * 2
    assert len(log.epoch_rows) == 4


def test_search_determinism_byte_identical_logs(tmp_path):
    _, log1 = run_search(seed=11)
    _, log2 = run_search(seed=11)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    log1.to_csv(p1)
    log2.to_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_search_seed_changes_trajectory(tmp_path):
    _, log1 = run_search(seed=1)
    _, log2 = run_search(seed=2)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    log1.to_csv(p1)
    log2.to_csv(p2)
    assert p1.read_bytes() != p2.read_bytes()


def test_alternating_mode_trains():
    model, log = run_search(mode="alternating", epochs=4)
    ds = mini_dataset()
    assert evaluate(model, ds.val_x, ds.val_y) > 1.0 / 3 + 0.05
    assert np.isfinite(log.final_cost())


def test_evolution_csv_round_trip(tmp_path):
    _, log = run_search(epochs=3)
    path = tmp_path / "evo.csv"
    log.to_csv(path)
    loaded = EvolutionLog.from_csv(path)
    assert loaded.pi_rows == log.pi_rows
    assert [(e, pytest.approx(l), pytest.approx(c)) for e, l, c in log.epoch_rows] == loaded.epoch_rows


def test_pi_floor_applies_to_log_only():
    model = one_layer_model((2, 3), (2, 3))
    layer = model.searchable_layers()[0]
    layer.alpha.data = np.array([0.0, 50.0])
    log = EvolutionLog()
    log.add_pi(0, layer.layer_id, "alpha", layer.pi_alpha())
    assert log.pi_rows[0][3][0] == 1e-6       # floored in the log
    assert layer.pi_alpha()[0] < 1e-6          # untouched in the model


def test_nan_abort_names_first_tensor():
    ds = mini_dataset()
    model = build_model(mini_spec(3), rng=np.random.default_rng(0))
    model.searchable_layers()[0].weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalAbort, match="c1.w"):
        search(model, ds, SearchConfig(epochs=1, seed=0, batch_size=32))


# --------------------------------------------------------------------------
# retrain / evaluate


def test_retrain_reports_exact_bitops_bookkeeping():
    ds = mini_dataset()
    spec = mini_spec(3)
    search_model = build_model(spec, rng=np.random.default_rng(0))
    arch = uniform_architecture(search_model, 2, 3)
    model, metrics = retrain(spec, arch, ds, RetrainConfig(epochs=2, seed=0, batch_size=32))
    want = sum(
        bitops(search_model.costs[lid], wb, ab)
        for lid, (wb, ab) in arch.as_assignments().items()
    )
    assert metrics["bitops"] == want
    assert metrics["normalizer"] == flops(search_model.costs["c1"])
    assert 0.0 <= metrics["top1"] <= 1.0


def test_retrain_learns_separable_data():
    ds = mini_dataset(classes=3, samples=240)
    spec = mini_spec(3)
    arch = uniform_architecture(build_model(spec, rng=np.random.default_rng(0)), 4, 4)
    _, metrics = retrain(spec, arch, ds, RetrainConfig(epochs=10, seed=0, batch_size=32))
    assert metrics["top1"] >= 0.8


def test_evaluate_counts_correctly():
    ds = mini_dataset()
    model = build_model(mini_spec(3), rng=np.random.default_rng(0))
    acc = evaluate(model, ds.val_x, ds.val_y)
    logits = model.forward(Tensor(ds.val_x), training=False)
    want = float(np.mean(np.argmax(logits.data, axis=1) == ds.val_y))
    assert acc == pytest.approx(want)


# --------------------------------------------------------------------------
# sensitivity


def test_sensitivity_null_bump_keeps_bitops():
    ds = mini_dataset()
    spec = mini_spec(3)
    model = build_model(spec, rng=np.random.default_rng(0))
    arch = uniform_architecture(model, 2, 2)
    cfg = RetrainConfig(epochs=2, seed=0, batch_size=32)
    res = sensitivity_probe(spec, ds, arch, "c2", (2, 2), cfg)
    assert res.delta_bitops == 0.0


def test_sensitivity_bump_matches_closed_form_bitops():
    ds = mini_dataset()
    spec = mini_spec(3)
    model = build_model(spec, rng=np.random.default_rng(0))
    arch = uniform_architecture(model, 2, 2)
    cfg = RetrainConfig(epochs=2, seed=0, batch_size=32)
    res = sensitivity_probe(spec, ds, arch, "c2", (4, 4), cfg)
    fc = model.costs["c2"]
    assert res.delta_bitops == bitops(fc, 4, 4) - bitops(fc, 2, 2)
    assert res.base_bits == (2, 2) and res.bumped_bits == (4, 4)


def test_sensitivity_invalid_layer_rejected():
    ds = mini_dataset()
    spec = mini_spec(3)
    arch = uniform_architecture(build_model(spec, rng=np.random.default_rng(0)), 2, 2)
    with pytest.raises(SearchError, match="nope"):
        sensitivity_probe(spec, ds, arch, "nope", (4, 4), RetrainConfig(epochs=1))
    with pytest.raises(SearchError, match="bits"):
        sensitivity_probe(spec, ds, arch, "c1", (9, 4), RetrainConfig(epochs=1))
