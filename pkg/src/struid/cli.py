"""Pipeline driver: every experiment reproducible from one config file.

Each stage writes its artifacts plus a manifest (config hash, seed, input
and output hashes) under the workdir; downstream stages refuse to run on
missing or configuration-mismatched predecessors, and rerunning a stage
whose inputs are unchanged is a no-op.

Exit codes: 0 success, 2 config/data error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig
from .corpus import build_corpus, load_bundle, save_bundle
from .errors import DataError, MissingArtifactError, NumericalError
from .evaluate import (
    project_ids,
    render_ablation_table,
    run_ablations,
    run_eval,
    split_fingerprint,
    write_projection_tsv,
)
from .ingest import (
    assign_regions,
    collect_poi_meta,
    dataset_stats,
    parse_checkins,
    read_split_jsonl,
    split_chronological,
    write_split_jsonl,
)
from .kg import KnowledgeGraph, build_kg
from .lm import SequenceRecommender
from .struids import read_struid_table, write_struid_table
from .synthcity import SynthCityConfig, generate_city
from .tokenizer import GraphTokenizer

logger = logging.getLogger("struid")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

ABLATION_VARIANTS = ("full", "wo_struid", "wo_reg", "wo_cat", "wo_regcat", "wo_pref", "wo_seq")


# -- manifest machinery ------------------------------------------------------


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(path.rglob("*")):
            if child.is_file():
                h.update(child.name.encode())
                h.update(child.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _stage_dir(workdir: Path, stage: str) -> Path:
    return workdir / stage.replace("-", "_")


def _manifest_path(workdir: Path, stage: str) -> Path:
    return _stage_dir(workdir, stage) / "manifest.json"


def read_manifest(workdir: Path, stage: str) -> dict | None:
    path = _manifest_path(workdir, stage)
    if not path.exists():
        return None
    return json.loads(path.read_text())


def write_manifest(workdir: Path, stage: str, cfg: RunConfig,
                   inputs: dict[str, Path], outputs: list[Path]) -> None:
    manifest = {
        "stage": stage,
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {name: _hash_path(Path(p)) for name, p in sorted(inputs.items())},
        "outputs": {str(p.relative_to(workdir)): _hash_path(p) for p in sorted(outputs)},
    }
    _manifest_path(workdir, stage).write_text(json.dumps(manifest, sort_keys=True, indent=2))


def stage_is_fresh(workdir: Path, stage: str, cfg: RunConfig, inputs: dict[str, Path]) -> bool:
    manifest = read_manifest(workdir, stage)
    if manifest is None or manifest.get("config_hash") != cfg.config_hash():
        return False
    current = {name: _hash_path(Path(p)) for name, p in inputs.items() if Path(p).exists()}
    if manifest.get("inputs") != {k: v for k, v in sorted(current.items())} or len(current) != len(inputs):
        return False
    for rel in manifest.get("outputs", {}):
        if not (workdir / rel).exists():
            return False
    return True


def require_stage(workdir: Path, stage: str, cfg: RunConfig, force: bool) -> dict:
    manifest = read_manifest(workdir, stage)
    if manifest is None:
        raise MissingArtifactError(f"missing artifact for stage {stage!r}: run `struid {stage}` first")
    if manifest.get("config_hash") != cfg.config_hash() and not force:
        raise DataError(
            f"config hash mismatch with stage {stage!r} artifacts; rerun it or pass --force")
    return manifest


# -- stage implementations ----------------------------------------------------


def stage_ingest(cfg: RunConfig, workdir: Path, force: bool) -> None:
    raw = Path(cfg["paths"]["raw"])
    if not raw.exists():
        raise DataError(f"raw check-in file not found: {raw}")
    inputs = {"raw": raw}
    if stage_is_fresh(workdir, "ingest", cfg, inputs):
        logger.info("ingest: up to date, skipping")
        return
    out = _stage_dir(workdir, "ingest")
    out.mkdir(parents=True, exist_ok=True)

    events = parse_checkins(raw, cfg["paths"]["format"])
    if not events:
        raise DataError("no events parsed from raw input")
    grid, region_map = assign_regions(events, cfg["regions"]["cells_per_axis"])
    split = split_chronological(events)
    write_split_jsonl(split, out)
    (out / "poi_meta.json").write_text(json.dumps(
        {poi: list(meta) for poi, meta in sorted(collect_poi_meta(events).items())}, sort_keys=True))
    (out / "regions.json").write_text(json.dumps({
        "grid": {"min_lat": grid.min_lat, "min_lon": grid.min_lon, "max_lat": grid.max_lat,
                 "max_lon": grid.max_lon, "cells_per_axis": grid.cells_per_axis},
        "map": dict(sorted(region_map.items())),
    }, sort_keys=True))
    stats = dataset_stats(events, region_map)
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=2))
    logger.info("ingest: %s", stats)
    outputs = [out / n for n in ("train.jsonl", "valid.jsonl", "test.jsonl",
                                 "poi_meta.json", "regions.json", "stats.json")]
    write_manifest(workdir, "ingest", cfg, inputs, outputs)


def _load_ingest(workdir: Path):
    out = _stage_dir(workdir, "ingest")
    split = read_split_jsonl(out)
    poi_meta = {poi: tuple(meta) for poi, meta in json.loads((out / "poi_meta.json").read_text()).items()}
    region_map = {poi: int(r) for poi, r in json.loads((out / "regions.json").read_text())["map"].items()}
    return split, poi_meta, region_map


def stage_build_kg(cfg: RunConfig, workdir: Path, force: bool, show_stats: bool = False) -> None:
    require_stage(workdir, "ingest", cfg, force)
    ingest_dir = _stage_dir(workdir, "ingest")
    inputs = {"splits": ingest_dir / "train.jsonl", "poi_meta": ingest_dir / "poi_meta.json",
              "regions": ingest_dir / "regions.json"}
    out = _stage_dir(workdir, "build-kg")
    if stage_is_fresh(workdir, "build-kg", cfg, inputs):
        logger.info("build-kg: up to date, skipping")
        if show_stats:
            print(json.dumps(KnowledgeGraph.load(out / "graph.json").triple_counts(), indent=2))
        return
    out.mkdir(parents=True, exist_ok=True)
    split, poi_meta, region_map = _load_ingest(workdir)
    graph = build_kg(split, poi_meta, region_map, d_km=cfg["kg"]["d_km"])
    graph.save(out / "graph.json")
    logger.info("build-kg: %s", graph.triple_counts())
    if show_stats:
        print(json.dumps(graph.triple_counts(), indent=2))
    write_manifest(workdir, "build-kg", cfg, inputs, [out / "graph.json"])


def stage_train_tokenizer(cfg: RunConfig, workdir: Path, force: bool) -> None:
    require_stage(workdir, "build-kg", cfg, force)
    graph_path = _stage_dir(workdir, "build-kg") / "graph.json"
    inputs = {"graph": graph_path}
    out = _stage_dir(workdir, "train-tokenizer")
    if stage_is_fresh(workdir, "train-tokenizer", cfg, inputs):
        logger.info("train-tokenizer: up to date, skipping")
        return
    out.mkdir(parents=True, exist_ok=True)
    graph = KnowledgeGraph.load(graph_path)
    tokenizer = GraphTokenizer(**cfg.tokenizer_params()).fit(graph)
    tokenizer.save(out / "checkpoint")
    (out / "history.json").write_text(json.dumps(tokenizer.history_, indent=2))
    write_manifest(workdir, "train-tokenizer", cfg, inputs,
                   [out / "checkpoint", out / "history.json"])


def stage_assign_ids(cfg: RunConfig, workdir: Path, force: bool) -> None:
    require_stage(workdir, "build-kg", cfg, force)
    require_stage(workdir, "train-tokenizer", cfg, force)
    graph_path = _stage_dir(workdir, "build-kg") / "graph.json"
    ckpt = _stage_dir(workdir, "train-tokenizer") / "checkpoint"
    inputs = {"graph": graph_path, "tokenizer": ckpt}
    out = _stage_dir(workdir, "assign-ids")
    if stage_is_fresh(workdir, "assign-ids", cfg, inputs):
        logger.info("assign-ids: up to date, skipping")
        return
    out.mkdir(parents=True, exist_ok=True)
    graph = KnowledgeGraph.load(graph_path)
    tokenizer = GraphTokenizer.load(ckpt)
    ids = tokenizer.assign_struids(graph)
    write_struid_table(out / "struids.tsv", ids, graph)
    write_manifest(workdir, "assign-ids", cfg, inputs, [out / "struids.tsv"])


def stage_build_corpus(cfg: RunConfig, workdir: Path, force: bool) -> None:
    for stage in ("ingest", "build-kg", "assign-ids"):
        require_stage(workdir, stage, cfg, force)
    ids_path = _stage_dir(workdir, "assign-ids") / "struids.tsv"
    graph_path = _stage_dir(workdir, "build-kg") / "graph.json"
    inputs = {"splits": _stage_dir(workdir, "ingest") / "train.jsonl",
              "graph": graph_path, "ids": ids_path}
    out = _stage_dir(workdir, "build-corpus")
    if stage_is_fresh(workdir, "build-corpus", cfg, inputs):
        logger.info("build-corpus: up to date, skipping")
        return
    out.mkdir(parents=True, exist_ok=True)
    split, _, _ = _load_ingest(workdir)
    graph = KnowledgeGraph.load(graph_path)
    ids = read_struid_table(ids_path)
    bundle = build_corpus(split, graph, ids, window=cfg["corpus"]["window"],
                          variant=cfg["ablation"]["variant"], seed=cfg.seed)
    names = save_bundle(out, bundle)
    sizes = {task: {part: len(bundle.part(task, part)) for part in ("train", "valid", "test")}
             for task in bundle.tasks()}
    logger.info("build-corpus: vocab=%d examples=%s", len(bundle.vocab), sizes)
    write_manifest(workdir, "build-corpus", cfg, inputs, [out / n for n in names])


def stage_train_lm(cfg: RunConfig, workdir: Path, force: bool) -> None:
    require_stage(workdir, "build-corpus", cfg, force)
    corpus_dir = _stage_dir(workdir, "build-corpus")
    inputs = {"corpus": corpus_dir}
    out = _stage_dir(workdir, "train-lm")
    if stage_is_fresh(workdir, "train-lm", cfg, inputs):
        logger.info("train-lm: up to date, skipping")
        return
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_bundle(corpus_dir)
    model = SequenceRecommender(**cfg.lm_params())
    model.fit(bundle.training_sequences(seed=cfg.seed), bundle.vocab)
    model.save(out / "checkpoint")
    (out / "history.json").write_text(json.dumps(model.history_, indent=2))
    write_manifest(workdir, "train-lm", cfg, inputs, [out / "checkpoint", out / "history.json"])


def stage_evaluate(cfg: RunConfig, workdir: Path, force: bool) -> None:
    for stage in ("ingest", "build-kg", "assign-ids", "build-corpus", "train-lm"):
        require_stage(workdir, stage, cfg, force)
    corpus_dir = _stage_dir(workdir, "build-corpus")
    lm_dir = _stage_dir(workdir, "train-lm") / "checkpoint"
    inputs = {"corpus": corpus_dir, "lm": lm_dir,
              "ids": _stage_dir(workdir, "assign-ids") / "struids.tsv"}
    out = _stage_dir(workdir, "evaluate")
    if stage_is_fresh(workdir, "evaluate", cfg, inputs):
        logger.info("evaluate: up to date, skipping")
        print((out / "report.txt").read_text())
        return
    out.mkdir(parents=True, exist_ok=True)
    split, _, _ = _load_ingest(workdir)
    graph = KnowledgeGraph.load(_stage_dir(workdir, "build-kg") / "graph.json")
    ids = read_struid_table(_stage_dir(workdir, "assign-ids") / "struids.tsv")
    bundle = load_bundle(corpus_dir)
    model = SequenceRecommender.load(lm_dir, bundle.vocab)
    report = run_eval(model, bundle, split, graph, ids,
                      ks=cfg["eval"]["ks"], beam_width=cfg["eval"]["beam_width"],
                      meta={"seed": cfg.seed, "config_hash": cfg.config_hash(),
                            "variant": bundle.variant,
                            "splits_hash": split_fingerprint(split)})
    (out / "report.json").write_text(report.dumps())
    (out / "report.txt").write_text(report.render())
    print(report.render())
    write_manifest(workdir, "evaluate", cfg, inputs, [out / "report.json", out / "report.txt"])


def stage_ablate(cfg: RunConfig, workdir: Path, force: bool) -> None:
    for stage in ("ingest", "build-kg", "assign-ids"):
        require_stage(workdir, stage, cfg, force)
    ids_path = _stage_dir(workdir, "assign-ids") / "struids.tsv"
    inputs = {"splits": _stage_dir(workdir, "ingest") / "train.jsonl",
              "graph": _stage_dir(workdir, "build-kg") / "graph.json", "ids": ids_path}
    out = _stage_dir(workdir, "ablate")
    if stage_is_fresh(workdir, "ablate", cfg, inputs):
        logger.info("ablate: up to date, skipping")
        print((out / "ablation.txt").read_text())
        return
    out.mkdir(parents=True, exist_ok=True)
    split, _, _ = _load_ingest(workdir)
    graph = KnowledgeGraph.load(_stage_dir(workdir, "build-kg") / "graph.json")
    ids = read_struid_table(ids_path)
    result = run_ablations(split, graph, ids, list(ABLATION_VARIANTS), cfg.lm_params(),
                           window=cfg["corpus"]["window"], corpus_seed=cfg.seed,
                           ks=cfg["eval"]["ks"], beam_width=cfg["eval"]["beam_width"],
                           meta={"seed": cfg.seed, "config_hash": cfg.config_hash()})
    (out / "ablation.json").write_text(json.dumps(result, sort_keys=True, indent=2))
    table = render_ablation_table(result)
    (out / "ablation.txt").write_text(table)
    print(table)
    write_manifest(workdir, "ablate", cfg, inputs, [out / "ablation.json", out / "ablation.txt"])


def stage_project(cfg: RunConfig, workdir: Path, force: bool) -> None:
    require_stage(workdir, "build-kg", cfg, force)
    require_stage(workdir, "train-tokenizer", cfg, force)
    graph_path = _stage_dir(workdir, "build-kg") / "graph.json"
    ckpt = _stage_dir(workdir, "train-tokenizer") / "checkpoint"
    inputs = {"graph": graph_path, "tokenizer": ckpt}
    out = _stage_dir(workdir, "project")
    if stage_is_fresh(workdir, "project", cfg, inputs):
        logger.info("project: up to date, skipping")
        return
    out.mkdir(parents=True, exist_ok=True)
    graph = KnowledgeGraph.load(graph_path)
    tokenizer = GraphTokenizer.load(ckpt)
    vectors = tokenizer.quantized_vectors(graph)["poi"]
    region_of = {int(p): int(r) for p, r in graph.triples["located"]}
    labels = [region_of[p] for p in range(graph.count("poi"))]
    rows, silhouette = project_ids(vectors, labels, graph.entities["poi"])
    write_projection_tsv(out / "pois.tsv", rows)
    (out / "silhouette.json").write_text(json.dumps(
        {"label": "region", "silhouette": silhouette}, sort_keys=True, indent=2))
    logger.info("project: silhouette by region = %s", silhouette)
    write_manifest(workdir, "project", cfg, inputs, [out / "pois.tsv", out / "silhouette.json"])


def stage_pipeline(cfg: RunConfig, workdir: Path, force: bool) -> None:
    stage_ingest(cfg, workdir, force)
    stage_build_kg(cfg, workdir, force)
    stage_train_tokenizer(cfg, workdir, force)
    stage_assign_ids(cfg, workdir, force)
    stage_build_corpus(cfg, workdir, force)
    stage_train_lm(cfg, workdir, force)
    stage_evaluate(cfg, workdir, force)
    stage_project(cfg, workdir, force)


def cmd_synth(args) -> None:
    cfg = SynthCityConfig(
        n_users=args.users, n_regions=args.regions, pois_per_region=args.pois_per_region,
        n_categories=args.categories, visits_per_user=args.visits, route_len=args.route_len,
        regularity=args.regularity, region_loyalty=args.region_loyalty,
        zipf_exponent=args.zipf, archetypes_per_region=args.archetypes,
        pool_size=args.pool_size, pool_loyalty=args.pool_loyalty, seed=args.seed,
    )
    events = generate_city(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .ingest import event_to_obj
    with open(out, "w") as fh:
        for e in events:
            fh.write(json.dumps(event_to_obj(e), sort_keys=True) + "\n")
    logger.info("synth: wrote %d events to %s", len(events), out)
    if args.demo_config:
        Path(args.demo_config).write_text(
            f'seed = {args.seed}\n\n[paths]\nraw = "{out}"\nformat = "jsonl"\n'
            f'workdir = "{args.workdir or "work"}"\n')
        logger.info("synth: wrote demo config to %s", args.demo_config)


# -- argument parsing -----------------------------------------------------------


def _apply_overrides(raw: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return raw


def _load_config(args) -> RunConfig:
    from .config import tomllib

    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        raw = tomllib.loads(path.read_text())
    raw = _apply_overrides(raw, getattr(args, "set", None))
    cfg = RunConfig.from_dict(raw)
    workdir = getattr(args, "workdir", None) or os.environ.get("STRUID_WORKDIR")
    if workdir:
        cfg.data["paths"]["workdir"] = workdir
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="struid",
                                     description="Graph-tokenized generative next-POI recommendation pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_stage(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--workdir", help="override paths.workdir (also: STRUID_WORKDIR)")
        p.add_argument("--force", action="store_true",
                       help="proceed despite config-hash mismatches with predecessors")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path, JSON value)")
        return p

    add_stage("ingest", "parse raw check-ins, derive regions, split chronologically")
    kg_p = add_stage("build-kg", "construct the knowledge graph from the training split")
    kg_p.add_argument("--stats", action="store_true", help="print triple counts per relation")
    add_stage("train-tokenizer", "train the graph-supervised residual quantizer")
    add_stage("assign-ids", "mint structural IDs for every entity")
    add_stage("build-corpus", "serialize multi-behavior prediction corpora")
    add_stage("train-lm", "train the sequence model on the corpus")
    add_stage("evaluate", "top-K metrics with constrained generation")
    add_stage("ablate", "retrain and evaluate every ablation variant")
    add_stage("project", "2-D principal-component projection of POI vectors")
    add_stage("pipeline", "run all stages in order")

    synth = sub.add_parser("synth", help="generate a synthetic check-in city")
    synth.add_argument("--out", required=True, help="output JSONL path")
    synth.add_argument("--users", type=int, default=20)
    synth.add_argument("--regions", type=int, default=2)
    synth.add_argument("--pois-per-region", type=int, default=30)
    synth.add_argument("--categories", type=int, default=6)
    synth.add_argument("--visits", type=int, default=60)
    synth.add_argument("--route-len", type=int, default=4)
    synth.add_argument("--regularity", type=float, default=0.9)
    synth.add_argument("--region-loyalty", type=float, default=0.95)
    synth.add_argument("--zipf", type=float, default=1.0)
    synth.add_argument("--archetypes", type=int, default=0)
    synth.add_argument("--pool-size", type=int, default=10)
    synth.add_argument("--pool-loyalty", type=float, default=0.9)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--demo-config", help="also write a minimal TOML config here")
    synth.add_argument("--workdir", help="workdir recorded in the demo config")
    return parser


STAGE_DISPATCH = {
    "ingest": stage_ingest,
    "train-tokenizer": stage_train_tokenizer,
    "assign-ids": stage_assign_ids,
    "build-corpus": stage_build_corpus,
    "train-lm": stage_train_lm,
    "evaluate": stage_evaluate,
    "ablate": stage_ablate,
    "project": stage_project,
    "pipeline": stage_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("STRUID_LOG", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            cmd_synth(args)
            return EXIT_OK
        cfg = _load_config(args)
        workdir = Path(cfg["paths"]["workdir"])
        workdir.mkdir(parents=True, exist_ok=True)
        if args.command == "build-kg":
            stage_build_kg(cfg, workdir, args.force, show_stats=args.stats)
        else:
            STAGE_DISPATCH[args.command](cfg, workdir, args.force)
        return EXIT_OK
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except NumericalError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERIC
    except DataError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
