"""Command-line surface: search, discretize, retrain, eval, sensitivity, report.

Every command takes a strict config file; search/retrain write their
outputs (logs, checkpoints, metrics, manifests) into a run directory.
Exit codes: 0 success, 2 configuration/format error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .complexity import ComplexityModel, write_cost_report
from .config import ConfigError, ExperimentConfig, load_config, save_effective, write_manifest
from .data import DataError, load_dataset
from .models import ModelSpecError, build_model, zoo_spec
from .quantizers import export_quantizer_table
from .report import ReportError, render_run_report
from .search import (
    Architecture,
    NumericalAbort,
    SearchError,
    discretize_sample,
    discretize_wta,
    evaluate,
    retrain,
    search,
    sensitivity_probe,
    uniform_architecture,
)

_USER_ERRORS = (
    ConfigError,
    DataError,
    ModelSpecError,
    SearchError,
    CheckpointError,
    ReportError,
    FileNotFoundError,
)


def _prepare(cfg: ExperimentConfig, mode="search", assignments=None):
    cfg.apply_precision()
    dataset = load_dataset(cfg.dataset)
    spec = zoo_spec(cfg.model.name, dataset.num_classes, dataset.input_shape)
    seed = cfg.search.seed if mode == "search" else cfg.retrain.seed
    model = build_model(
        spec,
        mode=mode,
        assignments=assignments,
        rng=np.random.default_rng(seed),
        default_pool=cfg.model.pool(),
        share_weights=cfg.model.share_weights,
        arch_init=cfg.search.arch_init,
    )
    return dataset, spec, model


def cmd_search(args) -> int:
    cfg = load_config(args.config, eta_override=args.eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, spec, model = _prepare(cfg)
    log = search(model, dataset, cfg.search)
    log.to_csv(out / "evolution.csv")
    cm = ComplexityModel.from_costs(model.costs, cfg.search.eta)
    write_cost_report(out / "cost_report.csv", cm.layer_report_rows(model.arch_state()))
    save_checkpoint(out / "search_model.edmp", model.state_dict())
    seen = {}
    for layer in model.searchable_layers():
        for q in (*layer.weight_quantizers, *layer.act_quantizers):
            seen[(q.kind, q.bits)] = q
    export_quantizer_table(out / "quantizer_table.csv", [seen[k] for k in sorted(seen)])
    save_effective(cfg, out / "effective_config.json")
    write_manifest(out / "manifest.json", "search", cfg)
    top1 = evaluate(model, dataset.val_x, dataset.val_y)
    print(json.dumps({"run": str(out), "relaxed_top1": top1, "final_cost": log.final_cost()}))
    return 0


def cmd_discretize(args) -> int:
    run = Path(args.run)
    cfg = load_config(run / "effective_config.json")
    dataset, spec, model = _prepare(cfg)
    if args.mode in ("wta", "sample"):
        model.load_state_dict(load_checkpoint(run / "search_model.edmp"))
        if args.mode == "wta":
            arch = discretize_wta(model)
        else:
            arch = discretize_sample(model, args.trials, args.seed)
    elif args.mode == "uniform":
        if args.weight_bits is None or args.act_bits is None:
            raise ConfigError("uniform mode needs --weight-bits and --act-bits")
        arch = uniform_architecture(model, args.weight_bits, args.act_bits)
    else:
        raise ConfigError(f"unknown discretization mode {args.mode!r}")
    out = Path(args.out) if args.out else run / f"architecture_{args.mode}.json"
    arch.save(out)
    write_manifest(
        Path(str(out) + ".manifest.json"), "discretize", cfg,
        {"mode": args.mode, "trials": args.trials, "sample_seed": args.seed},
    )
    print(json.dumps({"architecture": str(out), "total_bitops": arch.total_bitops}))
    return 0


def _metrics_doc(label, arch: Architecture, metrics: dict) -> dict:
    return {
        "schema": "metrics_v1",
        "label": label,
        "uniform": arch.is_uniform(),
        "weight_bits": {e.layer_id: e.weight_bits for e in arch.entries},
        "activation_bits": {e.layer_id: e.activation_bits for e in arch.entries},
        **metrics,
    }


def cmd_retrain(args) -> int:
    cfg = load_config(args.config)
    cfg.apply_precision()
    arch = Architecture.load(args.arch)
    dataset = load_dataset(cfg.dataset)
    spec = zoo_spec(cfg.model.name, dataset.num_classes, dataset.input_shape)
    model, metrics = retrain(spec, arch, dataset, cfg.retrain, cfg.model.share_weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    label = args.label or Path(args.arch).stem
    doc = _metrics_doc(label, arch, metrics)
    with open(out / "metrics.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    save_checkpoint(out / "retrained.edmp", model.state_dict())
    save_effective(cfg, out / "effective_config.json")
    write_manifest(out / "manifest.json", "retrain", cfg, {"architecture": str(args.arch)})
    print(json.dumps({"top1": metrics["top1"], "bitops": metrics["bitops"], "out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    arch = Architecture.load(args.arch)
    dataset, spec, model = _prepare(cfg, mode="fixed", assignments=arch.as_assignments())
    model.load_state_dict(load_checkpoint(args.checkpoint))
    top1 = evaluate(model, dataset.val_x, dataset.val_y)
    doc = {"top1": top1, "bitops": arch.total_bitops, "checkpoint": str(args.checkpoint)}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        write_manifest(Path(str(args.out) + ".manifest.json"), "eval", cfg,
                       {"architecture": str(args.arch), "checkpoint": str(args.checkpoint)})
    print(json.dumps(doc))
    return 0


def cmd_sensitivity(args) -> int:
    cfg = load_config(args.config)
    cfg.apply_precision()
    arch = Architecture.load(args.arch)
    dataset = load_dataset(cfg.dataset)
    spec = zoo_spec(cfg.model.name, dataset.num_classes, dataset.input_shape)
    base_metrics = None
    if args.base_metrics:
        with open(args.base_metrics) as f:
            base_metrics = json.load(f)
    result = sensitivity_probe(
        spec, dataset, arch, args.layer, (args.weight_bits, args.act_bits),
        cfg.retrain, base_metrics=base_metrics,
    )
    doc = dataclasses.asdict(result)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        write_manifest(Path(str(args.out) + ".manifest.json"), "sensitivity", cfg,
                       {"architecture": str(args.arch), "layer": args.layer})
    print(json.dumps(doc))
    return 0


def cmd_report(args) -> int:
    written = render_run_report(args.run, args.out, args.metrics)
    cfg_path = Path(args.run) / "effective_config.json"
    if cfg_path.exists():
        cfg = load_config(cfg_path)
        write_manifest(Path(written[0]).parent / "manifest.json", "report", cfg,
                       {"metrics": [str(m) for m in args.metrics]})
    print(json.dumps({"written": [str(p) for p in written]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mixprec",
        description="Differentiable per-filter bit-width search for small quantized convnets.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("search", help="run the bit-width search and log its evolution")
    sp.add_argument("--config", required=True)
    sp.add_argument("--eta", type=float, default=None, help="override the complexity multiplier")
    sp.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    sp.set_defaults(fn=cmd_search)

    dp = sub.add_parser("discretize", help="turn a searched run into a discrete architecture")
    dp.add_argument("--run", required=True)
    dp.add_argument("--mode", choices=["wta", "sample", "uniform"], default="wta")
    dp.add_argument("--trials", type=int, default=1)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("--weight-bits", type=int, default=None)
    dp.add_argument("--act-bits", type=int, default=None)
    dp.add_argument("--out", default=None)
    dp.set_defaults(fn=cmd_discretize)

    rp = sub.add_parser("retrain", help="train a discrete architecture from scratch")
    rp.add_argument("--config", required=True)
    rp.add_argument("--arch", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--label", default=None)
    rp.set_defaults(fn=cmd_retrain)

    ep = sub.add_parser("eval", help="evaluate a retrained checkpoint")
    ep.add_argument("--config", required=True)
    ep.add_argument("--arch", required=True)
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--out", default=None)
    ep.set_defaults(fn=cmd_eval)

    xp = sub.add_parser("sensitivity", help="bump one layer's bits and report the deltas")
    xp.add_argument("--config", required=True)
    xp.add_argument("--arch", required=True)
    xp.add_argument("--layer", required=True)
    xp.add_argument("--weight-bits", type=int, required=True)
    xp.add_argument("--act-bits", type=int, required=True)
    xp.add_argument("--base-metrics", default=None)
    xp.add_argument("--out", default=None)
    xp.set_defaults(fn=cmd_sensitivity)

    gp = sub.add_parser("report", help="render run CSVs and metrics into SVG charts")
    gp.add_argument("--run", required=True)
    gp.add_argument("--metrics", nargs="*", default=[])
    gp.add_argument("--out", default=None)
    gp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
