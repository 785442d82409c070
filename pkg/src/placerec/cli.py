"""Command-line front end: synth | train | build-db | query | eval | ablate."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from placerec.encoders import load_pca, load_tfidf, save_pca, save_tfidf
from placerec.errors import ConfigError, DataError, NumericError
from placerec.experiment import (
    CAMERA_SETS,
    ExperimentConfig,
    TextModels,
    build_table,
    config_from_dict,
    dump_config,
    evaluate_model,
    fit_model,
    format_modalities,
    load_config,
    load_dataset,
    parse_modalities,
    run_experiment,
)
from placerec.fusion import FUSION_LABELS
from placerec.numcore import load_checkpoint, precision, save_checkpoint
from placerec.plot import recall_svg
from placerec.retrieval import (
    format_table,
    load_database,
    metrics_csv,
    query_knn,
    recall_curve_csv,
    save_database,
)
from placerec.synthdata import Dataset, export_dataset, generate_world, load_real_dataset
from placerec.synthdata.storage import MANIFEST
from placerec.training import PlaceModel, embed

log = logging.getLogger("placerec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# Rows of the modality ablation, in table order.
MODALITY_ROWS = (
    "I(F)", "I(A)", "I(A)+S(A)", "I(A)+T(A)", "I(A)+S(A)+T(A)", "L",
    "L+I(F)", "L+I(A)", "L+I(A)+S(A)", "L+I(A)+T(A)", "L+I(A)+S(A)+T(A)",
)
FUSION_ROWS = ("add", "concat", "gem1d", "mlp512", "mlp256", "sa_add", "sa_concat")
CHECKPOINT_META = "checkpoint.yaml"


# -- config and data helpers ------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg


def write_config(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


def dataset_for(args, cfg: ExperimentConfig) -> Dataset:
    if getattr(args, "data", None):
        path = Path(args.data)
        return load_real_dataset(path / MANIFEST if path.is_dir() else path)
    return load_dataset(cfg)


def save_model(out: Path, cfg: ExperimentConfig, model: PlaceModel, text: TextModels | None, cameras: int) -> None:
    write_config(out, cfg)
    save_checkpoint(out / "model.pkt", model.state_dict())
    meta = {"cameras": cameras, "descriptor_dim": model.config.descriptor_dim,
            "layout": [[s.name, s.offset, s.length] for s in model.config.layout]}
    (out / CHECKPOINT_META).write_text(yaml.safe_dump(meta, sort_keys=True), encoding="utf-8")
    if text is not None:
        save_tfidf(out / "text.tfi", text.tfidf)
        save_pca(out / "text.pca", text.pca)


def load_model(ckpt: Path) -> tuple[ExperimentConfig, PlaceModel, TextModels | None]:
    if not (ckpt / "model.pkt").is_file():
        raise DataError(f"no checkpoint found in {ckpt}")
    cfg = load_config(ckpt / "config.yaml")
    meta = yaml.safe_load((ckpt / CHECKPOINT_META).read_text(encoding="utf-8"))
    model_cfg = cfg.model_config(int(meta["cameras"]))
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    with precision(dtype):
        model = PlaceModel(model_cfg, np.random.default_rng(0))
        model.load_state_dict(load_checkpoint(ckpt / "model.pkt"))
    text = None
    if "text" in model_cfg.modalities:
        text = TextModels(load_tfidf(ckpt / "text.tfi"), load_pca(ckpt / "text.pca"))
    return cfg, model, text


def _dtype(cfg: ExperimentConfig):
    return np.float32 if cfg.train.dtype == "float32" else np.float64


# -- subcommands --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    dataset = generate_world(cfg.world_config())
    export_dataset(dataset, out)
    write_config(out, cfg)
    print(f"wrote {len(dataset)} samples to {out / MANIFEST}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    dataset = dataset_for(args, cfg)
    result, text = fit_model(cfg, dataset)
    save_model(out, cfg, result.model, text, dataset.cameras)
    (out / "epoch_log.csv").write_text(result.log_csv(), encoding="utf-8")
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs; final loss {last.loss:.6f}, batch size {last.batch_size}; "
          f"descriptor dim {result.model.config.descriptor_dim}")
    return EXIT_OK


def _eval_inputs(args):
    cfg, model, text = load_model(Path(args.checkpoint))
    dataset = dataset_for(args, cfg)
    return cfg, model, text, dataset


def cmd_build_db(args) -> int:
    cfg, model, text, dataset = _eval_inputs(args)
    db, _, _ = evaluate_model(cfg, dataset, model, text)
    out = Path(args.out)
    write_config(out, cfg)
    save_database(out / "database.pdb", db)
    print(f"database: {db.size} rows x {db.dim} dims -> {out / 'database.pdb'}")
    return EXIT_OK


def cmd_query(args) -> int:
    cfg, model, text, dataset = _eval_inputs(args)
    db = load_database(args.database)
    by_id = {s.id: s for s in dataset}
    missing = [i for i in args.id if i not in by_id]
    if missing:
        raise DataError(f"unknown sample ids: {missing}")
    table = build_table(Dataset([by_id[i] for i in args.id], dataset.cameras, dataset.num_mask_classes),
                        model.config, text)
    desc = embed(model, table, dtype=_dtype(cfg))
    rows = []
    for qid, qd in zip(args.id, desc):
        for rank, (rid, dist) in enumerate(query_knn(db, qd, args.k), start=1):
            rows.append([qid, rank, rid, f"{dist:.6f}"])
    text_out = format_table(["query", "rank", "id", "distance"], rows)
    print(text_out, end="")
    if args.out:
        out = Path(args.out)
        write_config(out, cfg)
        lines = ["query,rank,id,distance"] + [",".join(map(str, r)) for r in rows]
        (out / "query.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def write_metrics(out: Path, name: str, metrics) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv([(name, metrics)]), encoding="utf-8")
    (out / "recall.csv").write_text(recall_curve_csv(metrics), encoding="utf-8")
    (out / "recall.svg").write_text(recall_svg({name: metrics.recall}), encoding="utf-8")


def cmd_eval(args) -> int:
    cfg, model, text, dataset = _eval_inputs(args)
    _, metrics, _ = evaluate_model(cfg, dataset, model, text)
    out = Path(args.out)
    write_config(out, cfg)
    write_metrics(out, cfg.modalities, metrics)
    print(format_table(["Modalities", "AR@1", "AR@1%"], [[cfg.modalities, metrics.ar1, metrics.ar1p]]), end="")
    return EXIT_OK


# -- ablation -----------------------------------------------------------------------------


def cell_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1, dtype=np.uint32)[0])


def ablation_cells(cfg: ExperimentConfig, axis: str) -> tuple[list[str], list[tuple[list, ExperimentConfig]]]:
    """(header labels, [(row labels, cell config)]) for one ablation axis."""
    branches, cam_set = parse_modalities(cfg.modalities)
    camera_borne = [b for b in branches if b != "cloud"]
    cells = []
    if axis == "fusion-methods":
        if not camera_borne:
            raise ConfigError("fusion ablation needs a camera-borne modality")
        mods = format_modalities(branches, "F+B")
        for method in FUSION_ROWS:
            cells.append((["F+B", FUSION_LABELS[method]], dataclasses.replace(cfg, modalities=mods, fusion=method)))
        header = ["Cams", "Fusion method"]
    elif axis == "camera-sets":
        if not camera_borne:
            raise ConfigError("camera ablation needs a camera-borne modality")
        for cams in CAMERA_SETS:
            mods = format_modalities(branches, cams)
            cells.append(([cams, FUSION_LABELS[cfg.fusion]], dataclasses.replace(cfg, modalities=mods)))
        header = ["Cams", "Fusion method"]
    elif axis == "modality-sets":
        for mods in MODALITY_ROWS:
            cells.append(([mods], dataclasses.replace(cfg, modalities=mods)))
        header = ["Modalities"]
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    seeded = []
    for i, (labels, c) in enumerate(cells):
        seeded.append((labels, dataclasses.replace(c, seed=cell_seed(cfg.seed, i), world_seed=cfg.world_seed
                                                   if cfg.world_seed is not None else cfg.seed)))
    return header, seeded


def _run_cell(cell_cfg: ExperimentConfig):
    res = run_experiment(cell_cfg)
    return res.train.model.config.descriptor_dim, res.metrics


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    header, cells = ablation_cells(cfg, args.axis)
    write_config(out, cfg)
    configs = [c for _, c in cells]
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(_run_cell, configs))
    else:
        results = []
        for (labels, c) in cells:
            log.info("running cell %s", " ".join(labels))
            results.append(_run_cell(c))
    rows, curves, csv_rows = [], {}, []
    for (labels, c), (dim, m) in zip(cells, results):
        rows.append(labels + [dim, round(m.ar1, 2), round(m.ar1p, 2)])
        curves[" ".join(labels)] = m.recall
        csv_rows.append(labels + [str(dim), f"{m.ar1:.2f}", f"{m.ar1p:.2f}", str(c.seed)])
    headers = header + ["Descriptor dim", "AR@1", "AR@1%"]
    table = format_table(headers, rows, highlight=(len(header) + 1, len(header) + 2))
    (out / "results.txt").write_text(table, encoding="utf-8")
    lines = [",".join(headers + ["seed"])] + [",".join(r) for r in csv_rows]
    (out / "results.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "recall.svg").write_text(recall_svg(curves, title=f"Recall@N ({args.axis})"), encoding="utf-8")
    print(table, end="")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not overwrite values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="experiment config (YAML)")
    common.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    common.add_argument("--out", default=d("out"), help="output directory")
    common.add_argument("--threads", type=int, default=d(1), help="parallel experiment cells (ablate)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="placerec", description=__doc__, parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset on disk")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model, write checkpoint and epoch log")
    p.add_argument("--data", help="dataset directory or manifest (default: generate from config)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("build-db", cmd_build_db, "embed the database traversals of the test split"),
                                 ("eval", cmd_eval, "evaluate a checkpoint; write metrics and recall curve")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True, help="directory written by 'train'")
        p.add_argument("--data", help="dataset directory or manifest (default: regenerate from checkpoint config)")
        p.set_defaults(func=func)

    p = sub.add_parser("query", parents=[common], help="k nearest database rows for given sample ids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--database", required=True, help="PDB1 file written by 'build-db'")
    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--id", nargs="+", required=True, help="query sample ids")
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation axis and merge results")
    p.add_argument("--axis", required=True, choices=("fusion-methods", "camera-sets", "modality-sets"))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
