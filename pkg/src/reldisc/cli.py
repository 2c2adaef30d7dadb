"""Command-line interface.

Subcommands cover the whole pipeline: ``prepare`` builds splits and the
tri-view cache, ``train`` runs the collaborative loop, ``evaluate``
scores a checkpoint and writes the word reports, ``predict`` labels new
sentences, and ``estimate-k`` guesses the relation count of the
unlabeled split. Every flag mirrors a config field; flags win over the
config file, and RELDISC_OUTPUT_DIR overrides the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import collab, corpus, evaluation, semantic_space, semifactual
from .config import (
    ConfigError,
    ExperimentConfig,
    TrainConfig,
    build_experiment_config,
    config_to_text,
    parse_config_file,
)
from .encoder import EncoderBackend, MockBackend, build_prompt, encode


class CliError(RuntimeError):
    pass


def _mock_backend_from_json(path: str | Path, seed_override: int | None = None) -> MockBackend:
    with open(path, encoding="utf-8") as f:
        spec = json.load(f)
    return MockBackend(
        means=spec["means"],
        vocab=spec["vocab"],
        hidden_dim=spec.get("hidden_dim", 16),
        seed=spec.get("seed", 0) if seed_override is None else seed_override,
        instance_noise=spec.get("instance_noise", 0.5),
        view_noise=spec.get("view_noise", 0.1),
        max_length=spec.get("max_length", 512),
    )


def _build_backend(config: ExperimentConfig) -> EncoderBackend:
    if config.backend == "mock":
        if not config.mock_config:
            raise CliError("backend 'mock' needs mock_config pointing at its table file")
        return _mock_backend_from_json(config.mock_config)
    if config.backend == "bert":
        from .encoder import MaskedLMBackend

        return MaskedLMBackend(config.backend_model)
    raise CliError(f"unknown backend {config.backend!r}")


def _pretrained_backend(config: ExperimentConfig) -> EncoderBackend:
    """A fresh, untrained backend for ground-truth template distributions."""
    return _build_backend(config)


def _split_policy(config: ExperimentConfig) -> corpus.SplitPolicy:
    if config.split_policy == "fewrel":
        return corpus.FEWREL_POLICY
    if config.split_policy == "tacred":
        return corpus.TACRED_POLICY
    raise CliError(f"unknown split policy {config.split_policy!r}")


def _out_paths(config: ExperimentConfig) -> dict[str, Path]:
    out = config.resolved_output_dir()
    return {
        "dir": out,
        "manifest": out / "manifest.txt",
        "views": out / "views.jsonl",
        "config": out / "config.txt",
        "checkpoint": out / "checkpoint.pt",
        "diagnostics": out / "diverged-checkpoint.pt",
        "metrics": out / "metrics.jsonl",
        "estimate": out / "estimate.txt",
        "report_json": out / "report.json",
        "report_tsv": out / "report.tsv",
        "cluster_words": out / "cluster_words.tsv",
        "relation_words": out / "relation_words.tsv",
    }


def _load_prepared(config: ExperimentConfig):
    paths = _out_paths(config)
    for key in ("manifest", "views"):
        if not paths[key].exists():
            raise CliError(f"missing {paths[key]}; run 'prepare' first")
    spec = corpus.read_manifest(paths["manifest"])
    views = semifactual.read_tri_views(paths["views"])
    return spec, views, paths


def _gold_indexer(predefined: Sequence[str], novel: Sequence[str]) -> dict[str, int]:
    index = {rel: i for i, rel in enumerate(predefined)}
    for offset, rel in enumerate(sorted(novel)):
        index[rel] = len(predefined) + offset
    return index


def _batched_dists(views: Sequence[semifactual.TriView], backend: EncoderBackend,
                   batch_size: int, view_index: int = 0) -> np.ndarray:
    prompts = [build_prompt(tv.views[view_index], instance_id=tv.source_id) for tv in views]
    rows = []
    for start in range(0, len(prompts), batch_size):
        reps = encode(prompts[start : start + batch_size], backend, mode="eval")
        rows.extend(rep.word_dist for rep in reps)
    return np.stack(rows)


def cmd_prepare(config: ExperimentConfig) -> int:
    if not config.dataset_path:
        raise CliError("dataset_path is required")
    paths = _out_paths(config)
    paths["dir"].mkdir(parents=True, exist_ok=True)

    instances = corpus.load_dataset(config.dataset_path, config.dataset_format)
    if config.pos_sidecar:
        instances = corpus.attach_pos_tags(
            instances, corpus.load_pos_sidecar(config.pos_sidecar)
        )
    for name, path in (("entity_lexicon", config.entity_lexicon),
                       ("synonym_lexicon", config.synonym_lexicon)):
        if not path:
            raise CliError(f"{name} is required for view generation")
        if not Path(path).exists():
            raise CliError(f"{name} file not found: {path}")
    entity_lexicon = semifactual.EntityTypeLexicon.from_tsv(config.entity_lexicon)
    synonym_lexicon = semifactual.SynonymLexicon.from_tsv(config.synonym_lexicon)

    spec = corpus.build_splits(
        instances, config.novel_ratio, _split_policy(config), config.train.seed
    )
    corpus.write_manifest(spec, paths["manifest"])

    data = corpus.materialize_splits(instances, spec)
    pool = [*data.labeled, *data.unlabeled, *data.test]
    views = semifactual.generate_tri_views(
        pool, entity_lexicon, synonym_lexicon, config.train.seed
    )
    semifactual.write_tri_views(views, paths["views"])
    paths["config"].write_text(config_to_text(config), encoding="utf-8")
    print(f"prepared {len(pool)} instances "
          f"({len(spec.novel_relations)} novel / {len(spec.predefined_relations)} pre-defined "
          f"relations) under {paths['dir']}")
    return 0


def _estimate_k(config: ExperimentConfig, spec, views, backend) -> int:
    unlabeled_views = [views[i] for i in spec.unlabeled_ids]
    dists = _batched_dists(unlabeled_views, backend, config.train.batch_size)
    known_total = len(spec.predefined_relations) + len(spec.novel_relations)
    k_init = config.k_init if config.k_init > 0 else 2 * known_total
    return semantic_space.estimate_relation_count(dists, k_init, config.train.seed)


def cmd_train(config: ExperimentConfig, resume: bool = False) -> int:
    spec, views, paths = _load_prepared(config)
    data = _materialize_from_views(spec, views)

    start_epoch = 0
    classifier = None
    if resume:
        if not paths["checkpoint"].exists():
            raise CliError(f"cannot resume: {paths['checkpoint']} does not exist")
        model = collab.load_checkpoint(paths["checkpoint"])
        backend = model.backend
        classifier = model.classifier
        start_epoch = model.last_epoch
        num_heads = model.num_heads
        print(f"resuming from epoch {start_epoch}")
    else:
        backend = _build_backend(config)
        if config.known_k:
            num_heads = len(spec.predefined_relations) + len(spec.novel_relations)
        else:
            num_heads = _estimate_k(config, spec, views, backend)
            paths["estimate"].write_text(f"{num_heads}\n", encoding="utf-8")
            print(f"estimated relation count: {num_heads}")

    model = collab.train(
        data,
        views,
        backend,
        num_heads,
        config.train,
        metrics_path=paths["metrics"],
        diagnostics_path=paths["diagnostics"],
        start_epoch=start_epoch,
        classifier=classifier,
    )
    collab.save_checkpoint(model, paths["checkpoint"])
    best = model.best_acc_all if model.best_epoch >= 0 else float("nan")
    print(f"trained {model.last_epoch} epochs; best ACC-all {best:.4f} "
          f"at epoch {model.best_epoch}; checkpoint at {paths['checkpoint']}")
    return 0


def _materialize_from_views(spec: corpus.SplitSpec, views) -> corpus.SplitData:
    """Rebuild split instances from the view cache (prepare stripped the
    unlabeled gold labels already)."""

    def instance_for(instance_id: str) -> corpus.RelationInstance:
        tv = views.get(instance_id)
        if tv is None:
            raise CliError(f"views cache is missing instance {instance_id!r}")
        main = tv.main
        # Only ids, labels, and view text matter downstream of prepare.
        return corpus.RelationInstance(
            instance_id=instance_id,
            tokens=main.tokens,
            head_span=corpus.Span(0, 1, main.head_surface),
            tail_span=corpus.Span(1, 2, main.tail_surface),
            relation_label=tv.relation_label,
        )

    return corpus.SplitData(
        labeled=tuple(instance_for(i) for i in spec.labeled_ids),
        unlabeled=tuple(instance_for(i) for i in spec.unlabeled_ids),
        test=tuple(instance_for(i) for i in spec.test_ids),
        predefined_relations=spec.predefined_relations,
        novel_relations=spec.novel_relations,
    )


def _load_descriptions(path: str) -> dict[str, str]:
    descriptions = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            relation, _, description = line.partition("\t")
            descriptions[relation] = description or relation
    return descriptions


def cmd_evaluate(config: ExperimentConfig, checkpoint: str | None = None) -> int:
    spec, views, paths = _load_prepared(config)
    ckpt_path = Path(checkpoint) if checkpoint else paths["checkpoint"]
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    model = collab.load_checkpoint(ckpt_path)

    test_views = [views[i] for i in spec.test_ids]
    gold_index = _gold_indexer(model.head_binding, spec.novel_relations)
    gold = np.array([gold_index[tv.relation_label] for tv in test_views])
    novel_set = set(spec.novel_relations)
    novel_mask = np.array([tv.relation_label in novel_set for tv in test_views])

    results = collab.infer_batch(model, test_views)
    pred = np.array([label for label, _ in results])
    report = evaluation.evaluate_partitions(pred, gold, novel_mask)

    # Relational-word reports from the main view's refined distributions.
    dists = _batched_dists(test_views, model.backend, model.config.batch_size)
    cluster_report = semantic_space.cluster_word_report(dists, pred, model.backend.vocab)
    semantic_space.write_word_report(cluster_report, paths["cluster_words"])

    relation_rows = []
    novel_dists: dict[str, np.ndarray] = {}
    for relation in sorted(novel_set):
        member = np.array([tv.relation_label == relation for tv in test_views])
        counts: dict[str, int] = {}
        for row in dists[member]:
            for word in semantic_space.top_relational_words(row, 3, model.backend.vocab):
                counts[word] = counts.get(word, 0) + 1
        top = sorted(counts, key=lambda w: (-counts[w], model.backend.vocab.index(w)))[:3]
        relation_rows.append(f"{relation}\t{','.join(top)}")
        novel_dists[relation] = dists[member].mean(axis=0)
    Path(paths["relation_words"]).write_text(
        "\n".join(relation_rows) + "\n", encoding="utf-8"
    )

    if config.relation_descriptions:
        descriptions = _load_descriptions(config.relation_descriptions)
        pretrained = _pretrained_backend(config)
        truth = {
            rel: evaluation.ground_truth_distribution(descriptions.get(rel, rel), pretrained)
            for rel in novel_dists
        }
        cos, kl, per_cos, per_kl = evaluation.novel_semantic_report(novel_dists, truth)
        report.cos, report.kl = cos, kl
        report.per_relation_cos, report.per_relation_kl = per_cos, per_kl

    paths["report_json"].write_text(report.to_json() + "\n", encoding="utf-8")
    paths["report_tsv"].write_text(report.to_tsv(), encoding="utf-8")
    print(report.to_tsv(), end="")
    return 0


def _instance_from_record(record: dict, row: int) -> corpus.RelationInstance:
    try:
        tokens = tuple(record["tokens"])
        head = corpus.Span(
            int(record["head_start"]), int(record["head_end"]),
            record.get("head_surface") or " ".join(tokens[int(record["head_start"]) : int(record["head_end"])]),
        )
        tail = corpus.Span(
            int(record["tail_start"]), int(record["tail_end"]),
            record.get("tail_surface") or " ".join(tokens[int(record["tail_start"]) : int(record["tail_end"])]),
        )
        pos = record.get("pos_tags")
        instance = corpus.RelationInstance(
            instance_id=str(record.get("instance_id", f"input/{row:06d}")),
            tokens=tokens,
            head_span=head,
            tail_span=tail,
            pos_tags=tuple(pos) if pos else None,
        )
        instance.validate()
        return instance
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"input row {row}: {exc}") from exc


def cmd_predict(config: ExperimentConfig, input_path: str,
                checkpoint: str | None = None) -> int:
    paths = _out_paths(config)
    ckpt_path = Path(checkpoint) if checkpoint else paths["checkpoint"]
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    model = collab.load_checkpoint(ckpt_path)
    entity_lexicon = (
        semifactual.EntityTypeLexicon.from_tsv(config.entity_lexicon)
        if config.entity_lexicon else semifactual.EntityTypeLexicon()
    )
    synonym_lexicon = (
        semifactual.SynonymLexicon.from_tsv(config.synonym_lexicon)
        if config.synonym_lexicon else semifactual.SynonymLexicon()
    )

    failures = 0
    print("instance_id\tlabel\twords")
    with open(input_path, encoding="utf-8") as f:
        for row, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                instance = _instance_from_record(record, row)
                tv = semifactual.generate_tri_view(
                    instance, entity_lexicon, synonym_lexicon, config.train.seed
                )
                label, words = collab.infer(model, tv)
                print(f"{instance.instance_id}\t{label}\t{','.join(words)}")
            except (CliError, json.JSONDecodeError, ValueError) as exc:
                failures += 1
                print(f"error: input row {row}: {exc}", file=sys.stderr)
    return 1 if failures else 0


def cmd_estimate_k(config: ExperimentConfig) -> int:
    spec, views, paths = _load_prepared(config)
    backend = _build_backend(config)
    estimate = _estimate_k(config, spec, views, backend)
    paths["estimate"].write_text(f"{estimate}\n", encoding="utf-8")
    print(estimate)
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key-value config file")
    for f in fields(ExperimentConfig):
        if f.name == "train":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        elif f.type in ("int", "float"):
            parser.add_argument(flag, type=int if f.type == "int" else float, default=None)
        else:
            parser.add_argument(flag, default=None)
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        elif f.type == "int":
            parser.add_argument(flag, type=int, default=None)
        elif f.type == "float":
            parser.add_argument(flag, type=float, default=None)
        elif f.type == "int | None":
            parser.add_argument(flag, type=int, default=None)
        else:
            parser.add_argument(flag, default=None)


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    known = {f.name for f in fields(ExperimentConfig)} | {f.name for f in fields(TrainConfig)}
    overrides = {
        key: value
        for key, value in vars(args).items()
        if key in known and value is not None
    }
    return build_experiment_config(file_values, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="reldisc", description="Open-world relation discovery pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("prepare", "build splits and the tri-view cache"),
        ("train", "run the collaborative training loop"),
        ("evaluate", "score a checkpoint and write word reports"),
        ("predict", "label new sentences with a trained checkpoint"),
        ("estimate-k", "estimate the relation count of the unlabeled split"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from the saved checkpoint")
        if name in ("evaluate", "predict"):
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: <output_dir>/checkpoint.pt)")
        if name == "predict":
            p.add_argument("--input", required=True, help="JSONL sentences file")

    args = parser.parse_args(argv)
    torch.manual_seed(0)
    try:
        config = _config_from_args(args)
        if args.command == "prepare":
            return cmd_prepare(config)
        if args.command == "train":
            return cmd_train(config, resume=args.resume)
        if args.command == "evaluate":
            return cmd_evaluate(config, checkpoint=args.checkpoint)
        if args.command == "predict":
            return cmd_predict(config, input_path=args.input, checkpoint=args.checkpoint)
        if args.command == "estimate-k":
            return cmd_estimate_k(config)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
