"""Command-line entry point: data generation, training, evaluation, and
inspection utilities.

Exit codes: 0 success, 1 I/O failure, 2 config/validation error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import dataset, evaluate, prior as prior_mod, trainer
from . import graph as graph_mod
from .dataset import DatasetError, SplitAssignment, SynthConfig
from .encoders import EncoderError
from .taxonomy import TaxonomyError, default_catalog
from .trainer import CheckpointError, NonFiniteAbort, TrainConfig, TrainerError

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

SEED_ENV = "SONO_ALIGN_SEED"


class ConfigError(Exception):
    pass


def _build_section(cls, raw, section):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    kwargs = dict(raw)
    if "images_per_case" in kwargs:
        kwargs["images_per_case"] = tuple(kwargs["images_per_case"])
    return cls(**kwargs)


class RunConfig:
    def __init__(self, synth: SynthConfig, train: TrainConfig, ratios, base_dir):
        self.synth = synth
        self.train = train
        self.ratios = ratios
        self.base_dir = base_dir

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config JSON: {e}") from e
    unknown = set(raw) - {"synth", "train", "ratios"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    synth = _build_section(SynthConfig, raw.get("synth", {}), "synth")
    train = _build_section(TrainConfig, raw.get("train", {}), "train")
    ratios = tuple(raw.get("ratios", (0.6, 0.2, 0.2)))
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must be three positive numbers summing to 1")
    config = RunConfig(synth, train, ratios, os.path.dirname(os.path.abspath(path)))
    seed_env = os.environ.get(SEED_ENV)
    if seed_env is not None:
        seed = int(seed_env)
        print(f"seed overridden by {SEED_ENV}={seed}")
        config.synth.seed = seed
        config.train.seed = seed
    return config


def cmd_gen_data(args):
    config = load_run_config(args.config)
    catalog = default_catalog()
    records = dataset.generate_synthetic(catalog, config.synth)
    split = dataset.split_cases([r.case_id for r in records],
                                ratios=config.ratios, seed=config.synth.seed)
    os.makedirs(args.out, exist_ok=True)
    dataset.save_jsonl(records, catalog, os.path.join(args.out, "records.jsonl"))
    split.save(os.path.join(args.out, "split.json"))
    counts = {s: len(split.cases(s)) for s in dataset.SPLITS}
    print(f"wrote {len(records)} records over {sum(counts.values())} cases "
          f"(train {counts['train']} / val {counts['val']} / test {counts['test']})")
    return EXIT_OK


def cmd_train(args):
    config = load_run_config(args.config)
    catalog = default_catalog()
    records = dataset.load_jsonl(args.data, catalog)
    split = SplitAssignment.load(args.split)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        report = trainer.fit(records, split, config.train, catalog, log_stream=log)
    trainer.save_checkpoint(report.best_state, os.path.join(args.out, "checkpoint.json"))
    test_records = split.records_for(records, "val")
    if test_records:
        metrics = evaluate.full_report(report.best_state, test_records, catalog)
        print(metrics.to_text())
    print(f"best epoch {report.best_epoch} (val I2T R@10 = {report.best_metric:.4f})")
    return EXIT_OK


def cmd_eval(args):
    catalog = default_catalog()
    state = trainer.load_checkpoint(args.checkpoint, catalog)
    records = dataset.load_jsonl(args.data, catalog)
    split = SplitAssignment.load(args.split)
    eval_records = split.records_for(records, args.split_name)
    if not eval_records:
        raise ConfigError(f"no records in split {args.split_name!r}")
    report = evaluate.full_report(state, eval_records, catalog)
    os.makedirs(args.report, exist_ok=True)
    evaluate.save_report(report,
                         json_path=os.path.join(args.report, "metrics.json"),
                         text_path=os.path.join(args.report, "metrics.txt"))
    print(report.to_text())
    return EXIT_OK


def _records_by_image_id(records):
    return {r.image_id: r for r in records}


def cmd_show_prior(args):
    catalog = default_catalog()
    records = dataset.load_jsonl(args.data, catalog)
    by_id = _records_by_image_id(records)
    ids = args.batch_ids.split(",")
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigError(f"unknown image id(s): {missing}")
    batch = [by_id[i] for i in ids]
    result = prior_mod.prior_matrix(batch, catalog)
    print("prior matrix:")
    for row in result.matrix:
        print("  " + "  ".join(f"{x:.6f}" for x in row))
    print("coverage:")
    for row in result.coverage:
        print("  " + "  ".join(str(int(x)) for x in row))
    if args.export:
        prior_mod.export_prior(result, args.export)
    return EXIT_OK


def cmd_inspect_graph(args):
    catalog = default_catalog()
    records = dataset.load_jsonl(args.data, catalog)
    by_id = _records_by_image_id(records)
    if args.image_id not in by_id:
        raise ConfigError(f"unknown image id {args.image_id!r}")
    g = graph_mod.build_graph(by_id[args.image_id], catalog)
    print(graph_mod.render_graph(g, catalog))
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as f:
            f.write(graph_mod.render_dot(g, catalog) + "\n")
    return EXIT_OK


def cmd_export_embeddings(args):
    catalog = default_catalog()
    state = trainer.load_checkpoint(args.checkpoint, catalog)
    records = dataset.load_jsonl(args.data, catalog)
    evaluate.export_embeddings(state, records, catalog, args.out)
    print(f"wrote embeddings for {len(records)} records to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sonoalign")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus and split manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save the best checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot and retrieval metrics from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--split-name", default="test", choices=dataset.SPLITS)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("show-prior", help="print the soft-prior matrix for named records")
    p.add_argument("--data", required=True)
    p.add_argument("--batch-ids", required=True, help="comma-separated image ids")
    p.add_argument("--export", default=None)
    p.set_defaults(func=cmd_show_prior)

    p = sub.add_parser("inspect-graph", help="print a record's bipartite label graph")
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--dot", default=None, help="optional DOT export path")
    p.set_defaults(func=cmd_inspect_graph)

    p = sub.add_parser("export-embeddings", help="dump image/text/fused embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, TaxonomyError, TrainerError,
            CheckpointError, EncoderError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
