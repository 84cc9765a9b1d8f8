"""The search engine: joint training of weights and architecture logits
under the complexity-penalized objective, discretization of the learned
branch probabilities, retraining of the chosen architecture, and
single-layer sensitivity probes.

One seeded generator drives every random draw of a loop (batch order is
the only consumer), so a fixed (config, seed, dataset) triple reproduces
runs bit-for-bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .complexity import ComplexityModel, lagrangian
from .data import Dataset
from .models import Model, NetworkSpec, build_model
from .tensor import SGD, Tape, Tensor, cross_entropy


class SearchError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    """Training hit non-finite values; carries the first offending tensor."""


@dataclass(frozen=True)
class SearchConfig:
    eta: float = 0.0
    epochs: int = 25
    lr_weights: float = 0.1
    lr_arch: float = 0.01
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    arch_init: float = 0.01
    mode: str = "single_pass"          # or "alternating"
    seed: int = 0
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.eta < 0:
            raise SearchError(f"eta must be nonnegative, got {self.eta}")
        if self.mode not in ("single_pass", "alternating"):
            raise SearchError(f"unknown optimization mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.lr_decay_every < 1:
            raise SearchError("epochs >= 1, batch_size >= 2, lr_decay_every >= 1 required")


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 50
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_every: int = 15
    seed: int = 0
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.lr_decay_every < 1:
            raise SearchError("epochs >= 1, batch_size >= 2, lr_decay_every >= 1 required")


# --------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class ArchEntry:
    layer_id: str
    weight_bits: int
    activation_bits: int


@dataclass
class Architecture:
    """Discrete per-layer bit-width assignment plus cost bookkeeping."""

    entries: list
    total_bitops: float = 0.0
    normalizer: float = 0.0

    def as_assignments(self) -> dict:
        return {e.layer_id: (e.weight_bits, e.activation_bits) for e in self.entries}

    def is_uniform(self) -> bool:
        pairs = {(e.weight_bits, e.activation_bits) for e in self.entries}
        return len(pairs) == 1

    def save(self, path) -> None:
        doc = {
            "schema": "architecture_v1",
            "layers": [asdict(e) for e in self.entries],
            "total_bitops": self.total_bitops,
            "normalizer": self.normalizer,
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Architecture":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("schema") != "architecture_v1":
            raise SearchError(f"{path}: not an architecture file (schema {doc.get('schema')!r})")
        extra = set(doc) - {"schema", "layers", "total_bitops", "normalizer"}
        if extra:
            raise SearchError(f"{path}: unknown keys {sorted(extra)}")
        entries = [ArchEntry(**e) for e in doc["layers"]]
        return cls(entries, doc.get("total_bitops", 0.0), doc.get("normalizer", 0.0))


def _arch_from_assignments(model: Model, assignments: dict) -> Architecture:
    cm = ComplexityModel.from_costs(model.costs, eta=0.0)
    entries = [
        ArchEntry(lid, int(assignments[lid][0]), int(assignments[lid][1]))
        for lid in model.costs
    ]
    return Architecture(entries, cm.discrete_bitops(assignments), cm.normalizer)


def uniform_architecture(model: Model, weight_bits: int, activation_bits: int) -> Architecture:
    assign = {lid: (weight_bits, activation_bits) for lid in model.costs}
    return _arch_from_assignments(model, assign)


# --------------------------------------------------------------------------
# evolution log


_PI_FLOOR = 1e-6  # collapsed probabilities are floored in the log only


@dataclass
class EvolutionLog:
    pi_rows: list = field(default_factory=list)       # (epoch, layer_id, kind, tuple of pi)
    epoch_rows: list = field(default_factory=list)    # (epoch, loss, cost)

    def add_pi(self, epoch, layer_id, kind, pi) -> None:
        floored = tuple(max(float(p), _PI_FLOOR) for p in pi)
        self.pi_rows.append((epoch, layer_id, kind, floored))

    def add_epoch(self, epoch, loss, cost) -> None:
        self.epoch_rows.append((epoch, float(loss), float(cost)))

    def final_cost(self) -> float:
        return self.epoch_rows[-1][2]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["schema", "evolution_log_v1"])
            w.writerow(["epoch", "layer_id", "kind", "values"])
            by_epoch: dict[int, list] = {}
            for row in self.pi_rows:
                by_epoch.setdefault(row[0], []).append(row)
            summaries = {e: (l, c) for e, l, c in self.epoch_rows}
            for epoch in sorted(set(by_epoch) | set(summaries)):
                for _, lid, kind, pi in by_epoch.get(epoch, []):
                    w.writerow([epoch, lid, kind, *[repr(p) for p in pi]])
                if epoch in summaries:
                    loss, cost = summaries[epoch]
                    w.writerow([epoch, "-", "loss", repr(loss)])
                    w.writerow([epoch, "-", "cost", repr(cost)])

    @classmethod
    def from_csv(cls, path) -> "EvolutionLog":
        log = cls()
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0] != ["schema", "evolution_log_v1"]:
            raise SearchError(f"{path}: not an evolution log")
        partial: dict[int, dict[str, float]] = {}
        for row in rows[2:]:
            epoch, lid, kind = int(row[0]), row[1], row[2]
            if kind in ("alpha", "beta"):
                log.pi_rows.append((epoch, lid, kind, tuple(float(v) for v in row[3:])))
            else:
                partial.setdefault(epoch, {})[kind] = float(row[3])
        for epoch in sorted(partial):
            log.epoch_rows.append((epoch, partial[epoch].get("loss", np.nan), partial[epoch].get("cost", np.nan)))
        return log


# --------------------------------------------------------------------------
# training loops


def _first_nonfinite_tensor(model: Model):
    for name, v in model.state_items():
        arr = v.data if isinstance(v, Tensor) else v
        if not np.isfinite(arr).all():
            return name
    return None


def _check_finite(model, loss_value, epoch, step):
    if np.isfinite(loss_value):
        return
    name = _first_nonfinite_tensor(model) or "loss"
    raise NumericalAbort(
        f"non-finite loss at epoch {epoch} step {step}; first non-finite tensor: '{name}'"
    )


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if len(idx) >= 2:  # batch norm needs more than one row
            yield idx


def _log_epoch(log, model, cm, epoch, mean_loss):
    for layer in model.searchable_layers():
        log.add_pi(epoch, layer.layer_id, "alpha", layer.pi_alpha())
        log.add_pi(epoch, layer.layer_id, "beta", layer.pi_beta())
    cost = cm.network_cost(model.arch_state())
    log.add_epoch(epoch, mean_loss, cost)


def search(model: Model, dataset: Dataset, config: SearchConfig) -> EvolutionLog:
    """Minimize classification loss + eta * relaxed cost by mini-batch SGD.

    ``single_pass`` updates weights and architecture logits from the same
    backward pass; ``alternating`` applies the weight step on even batches
    and the architecture step on odd ones.
    """
    if len(dataset.train_y) == 0:
        raise SearchError("dataset has no training samples")
    rng = np.random.default_rng(config.seed)
    cm = ComplexityModel.from_costs(model.costs, config.eta)
    opt_w = SGD(model.params_weight(), config.lr_weights, config.momentum, config.weight_decay)
    opt_o = SGD(model.params_other(), config.lr_weights, config.momentum, 0.0)
    opt_a = SGD(model.params_arch(), config.lr_arch, config.momentum, 0.0)
    log = EvolutionLog()
    searchable = model.searchable_layers()
    for epoch in range(config.epochs):
        if epoch > 0 and epoch % config.lr_decay_every == 0:
            for opt in (opt_w, opt_o, opt_a):
                opt.lr *= config.lr_decay
        losses = []
        for step, idx in enumerate(_batches(len(dataset.train_y), config.batch_size, rng)):
            xb = Tensor(dataset.train_x[idx])
            yb = dataset.train_y[idx]
            with Tape() as tape:
                logits = model.forward(xb, training=True)
                r_e = cross_entropy(logits, yb)
                r_c = cm.network_cost_tensor(searchable)
                loss = lagrangian(r_e, r_c, config.eta)
                _check_finite(model, loss.item(), epoch, step)
                tape.backward(loss)
            if config.mode == "single_pass":
                opt_w.step()
                opt_o.step()
                opt_a.step()
            elif step % 2 == 0:
                opt_w.step()
                opt_o.step()
            else:
                opt_a.step()
            opt_w.zero_grad()
            opt_o.zero_grad()
            opt_a.zero_grad()
            losses.append(r_e.item())
        _log_epoch(log, model, cm, epoch, float(np.mean(losses)))
    return log


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    hits = 0
    for start in range(0, len(y), batch_size):
        xb = Tensor(x[start : start + batch_size])
        logits = model.forward(xb, training=False)
        hits += int((np.argmax(logits.data, axis=1) == y[start : start + batch_size]).sum())
    return hits / len(y)


def retrain(
    spec: NetworkSpec,
    arch: Architecture,
    dataset: Dataset,
    config: RetrainConfig,
    share_weights: bool = True,
) -> tuple[Model, dict]:
    """Train the discretized fixed-precision network from scratch.

    Every searchable position becomes a single-branch quantized conv at
    the architecture's bit-widths; only weights train (no architecture
    parameters, no cost term).
    """
    rng = np.random.default_rng(config.seed)
    model = build_model(
        spec, mode="fixed", assignments=arch.as_assignments(), rng=rng, share_weights=share_weights
    )
    opt_w = SGD(model.params_weight(), config.lr, config.momentum, config.weight_decay)
    opt_o = SGD(model.params_other(), config.lr, config.momentum, 0.0)
    for epoch in range(config.epochs):
        if epoch > 0 and epoch % config.lr_decay_every == 0:
            opt_w.lr *= config.lr_decay
            opt_o.lr *= config.lr_decay
        for step, idx in enumerate(_batches(len(dataset.train_y), config.batch_size, rng)):
            xb = Tensor(dataset.train_x[idx])
            with Tape() as tape:
                logits = model.forward(xb, training=True)
                loss = cross_entropy(logits, dataset.train_y[idx])
                _check_finite(model, loss.item(), epoch, step)
                tape.backward(loss)
            opt_w.step()
            opt_o.step()
            opt_w.zero_grad()
            opt_o.zero_grad()
    rebuilt = _arch_from_assignments(model, arch.as_assignments())
    metrics = {
        "top1": evaluate(model, dataset.val_x, dataset.val_y),
        "bitops": rebuilt.total_bitops,
        "normalizer": rebuilt.normalizer,
        "normalized_bitops": rebuilt.total_bitops / rebuilt.normalizer,
        "retrain_epochs": config.epochs,
        "seed": config.seed,
    }
    return model, metrics


# --------------------------------------------------------------------------
# discretization


def discretize_wta(model: Model) -> Architecture:
    """Winner-take-all: per layer and kind, the branch of maximal
    probability; exact ties fall to the lower bit-width."""
    assign = {}
    for layer in model.searchable_layers():
        wi = int(np.argmax(layer.pi_alpha()))
        ai = int(np.argmax(layer.pi_beta()))
        assign[layer.layer_id] = (layer.pool.weight_bits[wi], layer.pool.activation_bits[ai])
    return _arch_from_assignments(model, assign)


def discretize_sample(model: Model, n_trials: int, seed: int) -> Architecture:
    """Multinomial sampling: draw n_trials per layer/kind and keep the
    branch with the highest count (ties to the lower bit-width)."""
    if n_trials < 1:
        raise SearchError(f"n_trials must be >= 1, got {n_trials}")
    rng = np.random.default_rng(seed)
    assign = {}
    for layer in model.searchable_layers():
        wi = int(np.argmax(rng.multinomial(n_trials, layer.pi_alpha())))
        ai = int(np.argmax(rng.multinomial(n_trials, layer.pi_beta())))
        assign[layer.layer_id] = (layer.pool.weight_bits[wi], layer.pool.activation_bits[ai])
    return _arch_from_assignments(model, assign)


# --------------------------------------------------------------------------
# sensitivity


@dataclass(frozen=True)
class SensitivityResult:
    layer_id: str
    base_bits: tuple
    bumped_bits: tuple
    base_top1: float
    bumped_top1: float
    delta_top1: float
    delta_bitops: float


def sensitivity_probe(
    spec: NetworkSpec,
    dataset: Dataset,
    base_arch: Architecture,
    layer_id: str,
    bumped_bits: tuple,
    config: RetrainConfig,
    base_metrics: dict | None = None,
) -> SensitivityResult:
    """Retrain with one layer's bit-widths changed and report the deltas."""
    assign = base_arch.as_assignments()
    if layer_id not in assign:
        raise SearchError(f"layer {layer_id!r} is not a searchable layer of this architecture")
    wb, ab = (int(b) for b in bumped_bits)
    if not (1 <= wb <= 8 and 1 <= ab <= 8):
        raise SearchError(f"bumped bits must be in [1, 8], got {bumped_bits}")
    if base_metrics is None:
        _, base_metrics = retrain(spec, base_arch, dataset, config)
    bumped_assign = dict(assign)
    bumped_assign[layer_id] = (wb, ab)
    bumped_entries = [ArchEntry(e.layer_id, *bumped_assign[e.layer_id]) for e in base_arch.entries]
    bumped_arch = Architecture(bumped_entries)
    _, bumped_metrics = retrain(spec, bumped_arch, dataset, config)
    return SensitivityResult(
        layer_id=layer_id,
        base_bits=tuple(assign[layer_id]),
        bumped_bits=(wb, ab),
        base_top1=base_metrics["top1"],
        bumped_top1=bumped_metrics["top1"],
        delta_top1=bumped_metrics["top1"] - base_metrics["top1"],
        delta_bitops=bumped_metrics["bitops"] - base_metrics["bitops"],
    )
