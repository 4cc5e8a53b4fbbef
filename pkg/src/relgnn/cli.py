"""Command-line pipeline: validate, graph-stats, sample, synth, dfs, train, eval, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dfs import (
    aggspecs_from_json,
    aggspecs_to_json,
    apply_feature_encoders,
    compute_features,
    enumerate_aggs,
    feature_encoders_from_json,
    feature_encoders_to_json,
    feature_names,
    fit_feature_encoders,
    write_features_csv,
)
from .encode import encoders_from_json, encoders_to_json, fit_encoders
from .graph import add_reverse_edges, database_to_graph, graph_stats
from .models import VARIANTS, GraphSchema, Model, ModelConfig
from .rdb import RdbError, load_database, remove_target_column, target_labels, validate_schema
from .sampler import DEFAULT_SIZE_CAP, SizeCapError, batch_sample, write_datapoints_jsonl
from .synth import SIGNALS, TEMPLATES, SynthSpec, generate
from .tensor import load_checkpoint, save_checkpoint, gradcheck as run_gradcheck
from .training import (
    GraphDataset,
    LinearModel,
    MlpModel,
    TableDataset,
    TrainConfig,
    baseline_logreg,
    baseline_mlp,
    evaluate,
    fold_encoder_rows,
    make_cv_plan,
    single_table_features,
    train,
)

MODELS = VARIANTS + ("logreg", "mlp", "dfs-logreg")

GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("relgnn")


def _setup_logging(out: Path | None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if out is not None:
        handlers.append(logging.FileHandler(out / "log.txt", mode="w", encoding="utf-8"))
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", handlers=handlers, force=True)


def _json_text(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _emit(args, payload: dict, filename: str) -> None:
    """Print the report and, when an output directory was given, persist it there."""
    sys.stdout.write(_json_text(payload))
    out = getattr(args, "out", None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(_json_text(payload), encoding="utf-8")


def _write_manifest(args) -> None:
    skip = {"func"}
    payload = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "manifest.json").write_text(_json_text(payload), encoding="utf-8")


def cmd_validate(args) -> int:
    db = load_database(args.dataset, strict=False)
    report = validate_schema(db)
    payload = {
        "n_tables": len(report.table_rows),
        "tables": report.table_rows,
        "target": report.target,
        "fk_resolution": {k: {"resolved": a, "cells": b} for k, (a, b) in report.fk_resolution.items()},
        "null_rate": report.null_rate,
        "categorical_cardinality": report.categorical_cardinality,
        "dangling_cells": len(db.dangling),
    }
    _emit(args, payload, "validate_report.json")
    return 0


def cmd_graph_stats(args) -> int:
    db = load_database(args.dataset)
    graph = database_to_graph(remove_target_column(db))
    if args.reverse_edges:
        graph = add_reverse_edges(graph)
    payload = json.loads(graph_stats(graph).to_json())
    _emit(args, payload, "graph_stats.json")
    return 0


def cmd_sample(args) -> int:
    _write_manifest(args)
    db = load_database(args.dataset)
    masked = remove_target_column(db)
    graph = database_to_graph(masked)
    rows = list(range(masked.tables[masked.target[0]].nrows))
    datapoints = batch_sample(graph, rows, edge_type_once=args.edge_type_once,
                              size_cap=args.size_cap, reverse_edges=args.reverse_edges)
    write_datapoints_jsonl(args.out / "datapoints.jsonl", datapoints, graph)
    sizes = [dp.num_nodes for dp in datapoints]
    payload = {
        "datapoints": len(datapoints),
        "total_nodes": int(np.sum(sizes)),
        "max_nodes": int(np.max(sizes)),
        "mean_nodes": float(np.mean(sizes)),
    }
    _emit(args, payload, "sample_report.json")
    return 0


def cmd_synth(args) -> int:
    _write_manifest(args)
    spec = SynthSpec(seed=args.seed, n_targets=args.targets, template=args.template,
                     signal=args.signal, noise=args.noise, children=tuple(args.children))
    db = generate(spec, args.out)
    payload = {
        "tables": {t.name: t.nrows for t in db.tables},
        "positive_rate": float(target_labels(db).mean()),
    }
    _emit(args, payload, "synth_report.json")
    return 0


def cmd_dfs(args) -> int:
    _write_manifest(args)
    db = load_database(args.dataset)
    masked = remove_target_column(db)
    specs = enumerate_aggs(masked, args.depth)
    rows = list(range(masked.tables[masked.target[0]].nrows))
    write_features_csv(args.out / "features.csv", masked, specs, rows)
    payload = {"rows": len(rows), "columns": feature_names(masked, specs)}
    _emit(args, payload, "dfs_report.json")
    return 0


def _train_config(args, fold_seed: int) -> TrainConfig:
    return TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch,
                       max_epochs=args.max_epochs, patience=args.patience,
                       oversample=args.oversample, seed=fold_seed)


def _fold_report(fi: int, result, metrics) -> dict:
    return {
        "fold": fi,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "val_auroc": result.best_val_auroc,
        "test_auroc": metrics["auroc"],
        "test_accuracy": metrics["accuracy"],
        "test_n": metrics["n"],
    }


def _train_gnn(args, masked, plan, out: Path) -> list[dict]:
    graph = database_to_graph(masked)
    rows = list(range(masked.tables[masked.target[0]].nrows))
    datapoints = batch_sample(graph, rows, edge_type_once=args.edge_type_once,
                              size_cap=args.size_cap, reverse_edges=args.reverse_edges)
    config = ModelConfig(variant=args.model, hidden=args.hidden, rounds=args.rounds,
                         dropout=0.5 if args.dropout is None else args.dropout)
    reports = []
    for fi, fold in enumerate(plan.folds):
        encoders = fit_encoders(masked, fold_encoder_rows(datapoints, fold.fit_ids))
        schema = GraphSchema.from_database(masked, encoders, reverse_edges=args.reverse_edges)
        net = Model(config, schema, seed=args.seed + fi)
        data = GraphDataset(masked, datapoints, encoders)
        result = train(net, data, fold, _train_config(args, args.seed + fi))
        metrics = evaluate(net, data, fold.test_ids)
        fold_dir = out / f"fold{fi}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(fold_dir / "checkpoint.bin", net.params)
        (fold_dir / "encoders.json").write_text(encoders_to_json(encoders), encoding="utf-8")
        reports.append(_fold_report(fi, result, metrics))
        log.info("fold %d: val auroc %.4f (epoch %d), test auroc %.4f",
                 fi, result.best_val_auroc, result.best_epoch, metrics["auroc"])
    meta = {"model": args.model, "config": config.to_json_dict(), "reverse_edges": args.reverse_edges,
            "edge_type_once": args.edge_type_once, "size_cap": args.size_cap}
    (out / "model.json").write_text(_json_text(meta), encoding="utf-8")
    return reports


def _baseline_features(args, masked, fit_rows, specs):
    """Single-table features, plus encoded relational aggregates for dfs-logreg; fit on fit_rows only."""
    target_table, _ = masked.target
    encoders = fit_encoders(masked, {target_table: list(fit_rows)})
    features = single_table_features(masked, encoders)
    dfs_encoders = None
    if specs is not None:
        n = masked.tables[target_table].nrows
        raw = compute_features(masked, specs, range(n))
        dfs_encoders = fit_feature_encoders(masked, specs, raw, fit_rows)
        features = np.concatenate([features, apply_feature_encoders(specs, raw, dfs_encoders)], axis=1)
    return features, encoders, dfs_encoders


def _train_baseline(args, masked, labels, plan, out: Path) -> list[dict]:
    specs = enumerate_aggs(masked, args.depth) if args.model == "dfs-logreg" else None
    dropout = 0.3 if args.dropout is None else args.dropout
    reports = []
    for fi, fold in enumerate(plan.folds):
        features, encoders, dfs_encoders = _baseline_features(args, masked, fold.fit_ids, specs)
        config = _train_config(args, args.seed + fi)
        if args.model == "mlp":
            net, result = baseline_mlp(features, labels, fold, config, dropout_p=dropout)
        else:
            net, result = baseline_logreg(features, labels, fold, config)
        metrics = evaluate(net, TableDataset(features, labels), fold.test_ids)
        fold_dir = out / f"fold{fi}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(fold_dir / "checkpoint.bin", net.params)
        (fold_dir / "encoders.json").write_text(encoders_to_json(encoders), encoding="utf-8")
        if dfs_encoders is not None:
            (fold_dir / "dfs_encoders.json").write_text(feature_encoders_to_json(dfs_encoders), encoding="utf-8")
        reports.append(_fold_report(fi, result, metrics))
        log.info("fold %d: val auroc %.4f (epoch %d), test auroc %.4f",
                 fi, result.best_val_auroc, result.best_epoch, metrics["auroc"])
    meta = {"model": args.model, "dropout": dropout}
    if specs is not None:
        meta["depth"] = args.depth
        meta["aggspecs"] = json.loads(aggspecs_to_json(specs))
    (out / "model.json").write_text(_json_text(meta), encoding="utf-8")
    return reports


def cmd_train(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    _setup_logging(args.out)
    _write_manifest(args)
    db = load_database(args.dataset)
    labels = target_labels(db)
    masked = remove_target_column(db)
    plan = make_cv_plan(len(labels), args.seed, args.folds)
    if args.model in VARIANTS:
        folds = _train_gnn(args, masked, plan, args.out)
    else:
        folds = _train_baseline(args, masked, labels, plan, args.out)
    aurocs = [f["test_auroc"] for f in folds]
    payload = {
        "model": args.model,
        "dataset": str(args.dataset),
        "seed": args.seed,
        "n_folds": len(folds),
        "folds": folds,
        "mean_test_auroc": float(np.mean(aurocs)),
        "sd_test_auroc": float(np.std(aurocs, ddof=1)) if len(aurocs) > 1 else 0.0,
        "mean_test_accuracy": float(np.mean([f["test_accuracy"] for f in folds])),
    }
    _emit(args, payload, "report.json")
    return 0


def _load_params(net, arrays: dict[str, np.ndarray]) -> None:
    if set(net.params) != set(arrays):
        raise RdbError("checkpoint parameters do not match the model built from this dataset")
    for name, tensor in net.params.items():
        if tuple(tensor.shape) != tuple(arrays[name].shape):
            raise RdbError(f"checkpoint shape mismatch for {name}")
        tensor.data = arrays[name]


def cmd_eval(args) -> int:
    meta = json.loads((args.run / "model.json").read_text(encoding="utf-8"))
    fold_dir = args.run / f"fold{args.fold}"
    arrays = load_checkpoint(fold_dir / "checkpoint.bin")
    db = load_database(args.dataset)
    labels = target_labels(db)
    masked = remove_target_column(db)
    rows = list(range(len(labels)))
    encoders = encoders_from_json((fold_dir / "encoders.json").read_text(encoding="utf-8"))
    if meta["model"] in VARIANTS:
        graph = database_to_graph(masked)
        datapoints = batch_sample(graph, rows, edge_type_once=meta["edge_type_once"],
                                  size_cap=meta["size_cap"], reverse_edges=meta["reverse_edges"])
        schema = GraphSchema.from_database(masked, encoders, reverse_edges=meta["reverse_edges"])
        net = Model(ModelConfig(**meta["config"]), schema, seed=0)
        data = GraphDataset(masked, datapoints, encoders)
    else:
        features = single_table_features(masked, encoders)
        if meta["model"] == "dfs-logreg":
            specs = aggspecs_from_json(json.dumps(meta["aggspecs"]))
            raw = compute_features(masked, specs, rows)
            dfs_encoders = feature_encoders_from_json((fold_dir / "dfs_encoders.json").read_text(encoding="utf-8"))
            features = np.concatenate([features, apply_feature_encoders(specs, raw, dfs_encoders)], axis=1)
        if meta["model"] == "mlp":
            net = MlpModel(features.shape[1], dropout_p=meta["dropout"])
        else:
            net = LinearModel(features.shape[1])
        data = TableDataset(features, labels)
    _load_params(net, arrays)
    metrics = evaluate(net, data, rows)
    payload = {"model": meta["model"], "dataset": str(args.dataset), "fold": args.fold, **metrics}
    _emit(args, payload, "eval_report.json")
    return 0


def _gradcheck_db():
    """Tiny two-table database with narrow scalar features, so finite differences stay cheap."""
    from .rdb import Column, ColumnKind, Database, Table, _resolve_foreign_keys

    parent = Table("P", [
        Column("id", ColumnKind("primary_key"), False, ["p0", "p1"]),
        Column("x", ColumnKind("scalar"), False, [1.0, -2.0]),
        Column("label", ColumnKind("categorical"), True, ["1", "0"]),
    ])
    child = Table("C", [
        Column("id", ColumnKind("primary_key"), False, ["c0", "c1", "c2"]),
        Column("p", ColumnKind("foreign_key", ("P", "id")), False, ["p0", "p0", "p1"]),
        Column("y", ColumnKind("scalar"), False, [0.5, None, 3.0]),
    ])
    db = Database([parent, child], {}, [], [(0, 2)])
    _resolve_foreign_keys(db, strict=True)
    return db


def cmd_gradcheck(args) -> int:
    db = load_database(args.dataset) if args.dataset is not None else _gradcheck_db()
    masked = remove_target_column(db)
    graph = database_to_graph(masked)
    datapoints = batch_sample(graph, [0])
    encoders = fit_encoders(masked, fold_encoder_rows(datapoints, [0]))
    schema = GraphSchema.from_database(masked, encoders)
    data = GraphDataset(masked, datapoints, encoders)
    batch = data.batch([0])
    variants = [args.model] if args.model else list(VARIANTS)
    nudge = np.random.default_rng(args.seed)
    results = {}
    for variant in variants:
        config = ModelConfig(variant=variant, hidden=args.hidden, gin_train_eps=variant in ("gin", "ergin"))
        net = Model(config, schema, seed=args.seed)
        params = [t for t in net.params.values() if t.requires_grad]
        for tensor in params:
            # move zero-initialized parameters off relu kinks so central differences are clean
            if not tensor.data.any():
                tensor.data = nudge.normal(0.0, 0.1, size=tensor.shape)
        err = run_gradcheck(lambda _: net.loss(batch), params)
        results[variant] = float(err)
        log.info("gradcheck %s: max rel err %.3g", variant, err)
    payload = {
        "checks": results,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": all(v <= GRADCHECK_TOLERANCE for v in results.values()),
    }
    _emit(args, payload, "gradcheck_report.json")
    return 0 if payload["passed"] else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relgnn",
                                     description="supervised learning on relational databases")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        return p

    def dataset_flag(p, required=True):
        p.add_argument("--dataset", type=Path, required=required)

    def out_flag(p, required=False):
        p.add_argument("--out", type=Path, required=required)

    def sampling_flags(p):
        p.add_argument("--edge-type-once", action="store_true")
        p.add_argument("--no-reverse-edges", dest="reverse_edges", action="store_false")
        p.add_argument("--size-cap", type=int, default=DEFAULT_SIZE_CAP)

    p = add("validate", cmd_validate, help="load a dataset and report schema health")
    dataset_flag(p)
    out_flag(p)

    p = add("graph-stats", cmd_graph_stats, help="node/edge counts of the database graph")
    dataset_flag(p)
    out_flag(p)
    p.add_argument("--no-reverse-edges", dest="reverse_edges", action="store_false")

    p = add("sample", cmd_sample, help="extract one subgraph datapoint per target row")
    dataset_flag(p)
    out_flag(p, required=True)
    sampling_flags(p)

    p = add("synth", cmd_synth, help="generate a synthetic dataset")
    out_flag(p, required=True)
    p.add_argument("--targets", type=int, required=True)
    p.add_argument("--template", choices=TEMPLATES, default="parent_child")
    p.add_argument("--signal", choices=SIGNALS, default="child_aggregate")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--children", type=int, nargs=2, default=[1, 6], metavar=("LO", "HI"))

    p = add("dfs", cmd_dfs, help="write flat aggregate features as CSV")
    dataset_flag(p)
    out_flag(p, required=True)
    p.add_argument("--depth", type=int, default=2)

    p = add("train", cmd_train, help="cross-validated training with test metrics")
    dataset_flag(p)
    out_flag(p, required=True)
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--oversample", action="store_true")
    sampling_flags(p)

    p = add("eval", cmd_eval, help="score a trained fold on a dataset")
    dataset_flag(p)
    out_flag(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)

    p = add("gradcheck", cmd_gradcheck, help="finite-difference check of model gradients")
    dataset_flag(p, required=False)
    out_flag(p)
    p.add_argument("--model", choices=VARIANTS, default=None)
    p.add_argument("--hidden", type=int, default=4)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        _setup_logging(None)
    try:
        return args.func(args)
    except (RdbError, SizeCapError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
