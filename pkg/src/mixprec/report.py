"""Render finished-run CSV logs and retrain metrics into SVG reports.

A run directory provides evolution.csv; metrics JSONs (from retrain runs)
feed the accuracy-vs-BitOps chart. That chart always carries the
uniform-precision baselines so mixed results are read against them.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

from .search import EvolutionLog, SearchError
from .svgplot import Series, line_chart, panel_grid, write_svg


class ReportError(ValueError):
    pass


def load_metrics(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != "metrics_v1":
        raise ReportError(f"{path}: not a metrics file (schema {doc.get('schema')!r})")
    for key in ("label", "top1", "bitops", "uniform"):
        if key not in doc:
            raise ReportError(f"{path}: metrics file lacks '{key}'")
    return doc


def _pi_panels(log: EvolutionLog, kind: str, bit_labels_by_layer):
    per_layer = defaultdict(list)
    for epoch, lid, k, pi in log.pi_rows:
        if k == kind:
            per_layer[lid].append((epoch, pi))
    panels = []
    for lid, rows in per_layer.items():
        rows.sort(key=lambda r: r[0])
        epochs = [r[0] for r in rows]
        n = len(rows[0][1])
        labels = bit_labels_by_layer.get(lid) or [f"b{i}" for i in range(n)]
        series = [
            Series(labels[i], epochs, [r[1][i] for r in rows]) for i in range(n)
        ]
        panels.append((lid, series))
    return panels


def _epoch_series(log: EvolutionLog):
    epochs = [e for e, _, _ in log.epoch_rows]
    losses = [l for _, l, _ in log.epoch_rows]
    costs = [c for _, _, c in log.epoch_rows]
    return epochs, losses, costs


def render_evolution(log: EvolutionLog, out_dir: Path, bit_labels=None) -> list:
    """One SVG per architecture-logit kind plus the loss/cost summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bit_labels = bit_labels or {}
    written = []
    for kind in ("alpha", "beta"):
        panels = _pi_panels(log, kind, bit_labels.get(kind, {}))
        if not panels:
            raise ReportError(f"evolution log has no {kind} rows")
        path = out_dir / f"{kind}_evolution.svg"
        write_svg(path, panel_grid(panels, title=f"branch probabilities ({kind}) by epoch"))
        written.append(path)
    epochs, losses, costs = _epoch_series(log)
    summary = panel_grid(
        [
            ("training loss", [Series("loss", epochs, losses)]),
            ("expected normalized cost", [Series("cost", epochs, costs, dashed=True)]),
        ],
        cols=2,
        panel_width=300,
        panel_height=220,
        title="search summary",
    )
    path = out_dir / "summary.svg"
    write_svg(path, summary)
    written.append(path)
    return written


def render_accuracy_vs_bitops(metrics: list, out_dir: Path) -> Path:
    """Accuracy against normalized BitOps; uniform baselines drawn as the
    reference curve, mixed architectures as points."""
    uniform = sorted((m for m in metrics if m["uniform"]), key=lambda m: m["bitops"])
    mixed = [m for m in metrics if not m["uniform"]]
    if not uniform:
        raise ReportError(
            "accuracy-vs-bitops report needs at least one uniform-precision baseline"
        )
    scale = uniform[0].get("normalizer") or 1.0
    series = [
        Series(
            "uniform baseline",
            [m["bitops"] / scale for m in uniform],
            [100.0 * m["top1"] for m in uniform],
            markers=True,
            dashed=True,
            color="#7f7f7f",
        )
    ]
    for i, m in enumerate(mixed):
        series.append(
            Series(
                m["label"],
                [m["bitops"] / scale],
                [100.0 * m["top1"]],
                markers=True,
                line=False,
            )
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "accuracy_vs_bitops.svg"
    write_svg(
        path,
        line_chart(
            series,
            title="top-1 accuracy vs normalized BitOps",
            xlabel="BitOps / first-layer FLOPs",
            ylabel="top-1 accuracy (%)",
        ),
    )
    return path


def render_run_report(run_dir, out_dir=None, metrics_paths=()) -> list:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    log_path = run_dir / "evolution.csv"
    if not log_path.exists():
        raise ReportError(f"{run_dir} has no evolution.csv")
    log = EvolutionLog.from_csv(log_path)
    bit_labels = _bit_labels_from_run(run_dir)
    written = render_evolution(log, out_dir, bit_labels)
    if metrics_paths:
        metrics = [load_metrics(p) for p in metrics_paths]
        written.append(render_accuracy_vs_bitops(metrics, out_dir))
    return written


def _bit_labels_from_run(run_dir: Path):
    cfg_path = run_dir / "effective_config.json"
    if not cfg_path.exists():
        return {}
    with open(cfg_path) as f:
        doc = json.load(f)
    model = doc.get("model", {})
    wb = model.get("weight_bits")
    ab = model.get("activation_bits")
    if not wb or not ab:
        return {}
    wl = [f"{b}b" for b in wb]
    al = [f"{b}b" for b in ab]
    return {
        "alpha": defaultdict(lambda: wl),
        "beta": defaultdict(lambda: al),
    }
