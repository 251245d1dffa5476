"""Command-line interface: ``sgat train | evaluate | prune | analyze``.

Exit codes: 0 on success, 2 for usage or input problems, 1 for runtime
failures. Training settings resolve as built-in defaults < dataset preset <
``--config`` JSON file < explicit flags, and the effective settings are written
into every summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    HEAD_FIELDS,
    HISTOGRAM_FIELDS,
    LAMBDA_FIELDS,
    REMOVAL_FIELDS,
    STRATEGIES,
    attention_variance,
    head_sweep,
    lambda_sweep,
    removal_strategy_curve,
    variance_histogram,
    write_rows,
)
from .data import available_datasets, resolve_dataset, save_dataset
from .errors import ConfigError, InputError, SgatError, StructuralError
from .graph import EdgeMask, apply_mask_threshold, homophily_report
from .models import GatModel, SgatModel, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    build_model,
    evaluate,
    kept_edges,
    preset_config,
    train,
    write_epoch_log,
)

log = logging.getLogger("sgat")

SUMMARY_SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "SGAT_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"

# flag -> (TrainConfig field, type, help)
CONFIG_FLAGS = {
    "--model": ("model", str, "sgat, gcn or gat"),
    "--lambda": ("lam", float, "weight of the expected-L0 edge penalty"),
    "--lr": ("lr", float, "Adam learning rate"),
    "--epochs": ("epochs", int, "maximum training epochs"),
    "--l2": ("l2_weight", float, "L2 weight on layer weights"),
    "--dropout": ("dropout_input", float, "input dropout per layer"),
    "--attn-dropout": ("dropout_attn", float, "dropout on attention coefficients"),
    "--seed": ("seed", int, "seed for initialisation, dropout, gates and random splits"),
    "--heads": ("heads", int, "attention heads per layer"),
    "--layers": ("layers", int, "number of layers"),
    "--hidden": ("hidden", int, "hidden units per head"),
    "--patience": ("patience", int, "early-stopping patience in epochs"),
    "--gate": ("gate", str, "edge gates: inductive, transductive or open"),
    "--log-alpha-mean": ("log_alpha_mean", float, "initial mean of transductive log-alpha"),
}


class UsageError(SgatError):
    pass


# -- helpers ---------------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training settings")
    g.add_argument("--config", type=Path, help="JSON file of training settings")
    for flag, (dest, typ, help_) in CONFIG_FLAGS.items():
        g.add_argument(flag, dest=dest, type=typ, default=None, help=help_)


def _add_dataset_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--dataset", required=required, help="built-in or registry dataset name")
    p.add_argument("--registry", type=Path, default=None,
                   help="dataset registry file (default: $SGAT_DATA_DIR/datasets.ini)")


def _add_output_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output-dir", type=Path, default=None,
                   help=f"output directory (default: ${OUTPUT_DIR_ENV} or ./{DEFAULT_OUTPUT_DIR})")


def _output_dir(args) -> Path:
    out = args.output_dir or Path(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_config(args, dataset: str | None = None, **base) -> TrainConfig:
    """Defaults < preset for ``dataset`` < ``base`` < ``--config`` file < flags."""
    overrides = dict(base)
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise InputError(f"{args.config}: expected a JSON object")
        overrides.update(loaded)
    for dest, _, _ in CONFIG_FLAGS.values():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[dest] = value
    return preset_config(dataset or "", **overrides)


def _load_graph(args, seed: int):
    try:
        return resolve_dataset(args.dataset, registry_path=args.registry, seed=seed)
    except InputError as exc:
        if not str(exc).startswith("unknown dataset"):
            raise
        listing = "\n".join(f"  {k:14s} {v}" for k, v in available_datasets(args.registry).items())
        raise UsageError(f"{exc}. Available datasets:\n{listing}") from None


def _finite(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def _homophily(graph):
    if np.any(graph.labels < 0):
        return None, None
    h, isolated = homophily_report(graph)
    return h, isolated


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_model(path: Path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# -- commands ---------------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = resolve_config(args, args.dataset)
    graph = _load_graph(args, config.seed)
    out = _output_dir(args)
    start = time.perf_counter()
    model = build_model(graph, config)
    result = train(graph, model, config)
    elapsed = time.perf_counter() - start
    save_checkpoint(model, out / "checkpoint.json",
                    extra={"dataset": args.dataset, "config": config.to_dict()})
    write_epoch_log(result.log, out / "epochs.csv")
    h, isolated = _homophily(graph)
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "train",
        "dataset": args.dataset,
        "seed": config.seed,
        "config": config.to_dict(),
        "accuracy": result.test_acc,
        "train_accuracy": _finite(result.train_acc),
        "val_accuracy": _finite(result.val_acc),
        "best_epoch": result.best_epoch,
        "kept_edges": result.kept_edges,
        "total_edges": result.total_edges,
        "edges_removed_pct": 100.0 * result.removed_fraction,
        "homophily": h,
        "isolated_nodes": isolated,
        "runtime_seconds": elapsed,
        "files": {"checkpoint": "checkpoint.json", "epochs": "epochs.csv"},
    }
    _write_json(out / "summary.json", summary)
    print(f"{args.dataset}: accuracy {result.test_acc:.4f}, "
          f"{summary['edges_removed_pct']:.1f}% edges removed "
          f"({result.kept_edges}/{result.total_edges} kept), best epoch {result.best_epoch}")
    return 0


def _dataset_for(args, extra: dict) -> str:
    name = args.dataset or extra.get("dataset")
    if not name:
        raise UsageError("no --dataset given and the checkpoint does not name one")
    args.dataset = name
    return name


def cmd_evaluate(args) -> int:
    model, extra = _load_model(args.checkpoint)
    _dataset_for(args, extra)
    seed = args.seed if args.seed is not None else extra.get("config", {}).get("seed", 0)
    graph = _load_graph(args, seed)
    out = _output_dir(args)
    accs = {}
    for name, mask in (("train", graph.train_mask), ("val", graph.val_mask), ("test", graph.test_mask)):
        accs[name] = evaluate(model, graph, mask) if np.any(mask) else None
    kept = kept_edges(model, graph)
    total = graph.n_non_self_edges
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "evaluate",
        "dataset": args.dataset,
        "checkpoint": str(args.checkpoint),
        "seed": seed,
        "config": extra.get("config"),
        "accuracy": accs["test"],
        "train_accuracy": accs["train"],
        "val_accuracy": accs["val"],
        "kept_edges": kept,
        "total_edges": total,
        "edges_removed_pct": 100.0 * (1 - kept / total) if total else 0.0,
    }
    _write_json(out / "evaluation.json", summary)
    print(f"{args.dataset}: test accuracy {accs['test']}, "
          f"{summary['edges_removed_pct']:.1f}% edges removed")
    return 0


def cmd_prune(args) -> int:
    model, extra = _load_model(args.checkpoint)
    if not isinstance(model, SgatModel):
        raise UsageError(f"prune needs an SGAT checkpoint, got a {model.kind} model")
    _dataset_for(args, extra)
    seed = extra.get("config", {}).get("seed", 0)
    graph = _load_graph(args, seed)
    la = model.compute_log_alpha(graph)
    if la is None:
        la_values = np.full(graph.n_non_self_edges, np.inf)
    else:
        la_values = la.values[:, 0]
    mask = model.edge_mask(graph, la)
    pruned, report = apply_mask_threshold(graph, EdgeMask.for_graph(graph, mask))
    out = args.output
    save_dataset(pruned, out, name=args.name)
    ids = graph.non_self_edge_ids
    removed = np.flatnonzero(mask[ids] <= 0)
    with open(out / "removed_edges.tsv", "w") as fh:
        fh.write("src\tdst\tlog_alpha\tmask\n")
        for pos in removed:
            e = ids[pos]
            fh.write(f"{graph.edge_src[e]}\t{graph.col_idx[e]}\t{float(la_values[pos])!r}\t{float(mask[e])!r}\n")
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "prune",
        "dataset": args.dataset,
        "checkpoint": str(args.checkpoint),
        "removed_edges": int(report.removed_edges),
        "candidate_edges": int(report.candidate_edges),
        "edges_removed_pct": 100.0 * report.removed_fraction,
        "n_nodes": pruned.n_nodes,
        "registry": "datasets.ini",
        "dataset_name": args.name,
    }
    _write_json(out / "prune_summary.json", summary)
    print(f"removed {report.removed_edges} of {report.candidate_edges} edges "
          f"({summary['edges_removed_pct']:.1f}%); pruned graph in {out}")
    return 0


def _parse_grid(text: str, typ):
    try:
        values = [typ(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}: {exc}") from None
    if not values:
        raise UsageError("grid is empty")
    return values


def cmd_analyze(args) -> int:
    out = _output_dir(args)
    what = args.analysis
    if what == "removal-curve":
        model, extra = _load_model(args.checkpoint)
        _dataset_for(args, extra)
        config = TrainConfig(**extra["config"]) if extra.get("config") else resolve_config(args, args.dataset)
        graph = _load_graph(args, config.seed)
        fractions = _parse_grid(args.fractions, float)
        rows = removal_strategy_curve(model, graph, fractions, args.strategies.split(","),
                                      retrain=args.retrain, config=config, seed=config.seed)
        path = out / "removal_curve.csv"
        write_rows(path, REMOVAL_FIELDS, rows)
    elif what == "attn-variance":
        if args.checkpoint is not None:
            model, extra = _load_model(args.checkpoint)
            if not isinstance(model, GatModel):
                raise UsageError("attn-variance needs a dense GAT checkpoint")
            _dataset_for(args, extra)
            graph = _load_graph(args, extra.get("config", {}).get("seed", 0))
        else:
            if not args.dataset:
                raise UsageError("attn-variance needs --dataset or --checkpoint")
            config = resolve_config(args, args.dataset, model="gat", heads=8)
            graph = _load_graph(args, config.seed)
            model = build_model(graph, config)
            train(graph, model, config)
        variances = attention_variance(model.attention_coefficients(graph))
        rows = variance_histogram(variances, args.bin_width)
        path = out / "attn_variance.csv"
        write_rows(path, HISTOGRAM_FIELDS, rows)
        mode = int(np.argmax([r.count for r in rows]))
        print(f"{variances.size} edges, modal bin {mode} "
              f"[{rows[mode].lower:.4f}, {rows[mode].upper:.4f})")
    elif what == "lambda-sweep":
        config = resolve_config(args, args.dataset)
        graph = _load_graph(args, config.seed)
        rows = lambda_sweep(graph, _parse_grid(args.grid, float), config)
        path = out / "lambda_sweep.csv"
        write_rows(path, LAMBDA_FIELDS, rows)
    else:
        config = resolve_config(args, args.dataset)
        graph = _load_graph(args, config.seed)
        rows = head_sweep(graph, _parse_grid(args.grid, int), config)
        path = out / "head_sweep.csv"
        write_rows(path, HEAD_FIELDS, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgat", description="Sparse graph attention networks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, epoch log and summary")
    _add_dataset_flags(p)
    _add_config_flags(p)
    _add_output_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_dataset_flags(p, required=False)
    p.add_argument("--seed", type=int, default=None, help="split seed (default: the checkpoint's)")
    _add_output_flag(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("prune", help="export the edge-sparsified graph of an SGAT checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_dataset_flags(p, required=False)
    p.add_argument("--output", type=Path, required=True, help="directory for the pruned dataset")
    p.add_argument("--name", default="pruned", help="dataset name in the written registry")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("analyze", help="diagnostic experiments")
    asub = p.add_subparsers(dest="analysis", required=True)

    a = asub.add_parser("removal-curve", help="accuracy after removing edges ranked by log-alpha")
    a.add_argument("--checkpoint", type=Path, required=True)
    _add_dataset_flags(a, required=False)
    a.add_argument("--fractions", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    a.add_argument("--strategies", default=",".join(STRATEGIES))
    a.add_argument("--retrain", action="store_true", help="retrain on each pruned graph")
    _add_output_flag(a)

    a = asub.add_parser("attn-variance", help="histogram of per-edge dense-GAT attention variance")
    a.add_argument("--checkpoint", type=Path, default=None, help="trained GAT (else one is trained)")
    _add_dataset_flags(a, required=False)
    a.add_argument("--bin-width", type=float, default=0.002)
    _add_config_flags(a)
    _add_output_flag(a)

    a = asub.add_parser("lambda-sweep", help="one training run per lambda")
    _add_dataset_flags(a)
    a.add_argument("--grid", required=True, help="comma-separated lambda values")
    _add_config_flags(a)
    _add_output_flag(a)

    a = asub.add_parser("head-sweep", help="one training run per head count")
    _add_dataset_flags(a)
    a.add_argument("--grid", default="1,2,4,8", help="comma-separated head counts")
    _add_config_flags(a)
    _add_output_flag(a)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InputError, ConfigError, StructuralError) as exc:
        print(f"sgat: error: {exc}", file=sys.stderr)
        return 2
    except SgatError as exc:
        print(f"sgat: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
