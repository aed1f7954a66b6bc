"""Command-line interface: train, evaluate, predict, ensemble, gradcheck, stats.

Per-dataset presets resolve to the published hyperparameter choices; any
field can be overridden by a JSON config file (--config) or flags. Every
run writes a resolved-config snapshot next to its outputs so it can be
reproduced bit for bit.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tape, Tensor, finite_difference_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classify import (ClassifierConfig, ClassifierModel, classification_loss,
                       evaluate_accuracy, predict_classes, train_classifier)
from .data import DataError, default_data_dir, expected_stats, load_dataset, validate_stats
from .encoder import Propagation, apply_edge_dropout
from .graph import build_graph, normalization
from .linkpred import (EnsembleConfig, LinkPredConfig, LinkPredModel, build_linkpred_model,
                       candidate_score_fn, corrupt_batch, ensemble_candidate_score_fn,
                       check_vocabulary, evaluate_model, linkpred_loss, train_linkpred)
from .ranking import FilterSet, RankingReport, degree_bucket_mrr, evaluate_ranking

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Published per-dataset settings; fields the source leaves open keep the
# config dataclass defaults and are marked "default (unspecified)" in --help.
PRESETS: dict[str, dict] = {
    "aifb": {"task": "classify", "hidden_dim": 16, "num_layers": 2, "epochs": 50,
             "learning_rate": 0.01, "l2_first_layer": 0.0, "basis_count": 0,
             "normalization": "per-relation"},
    "mutag": {"task": "classify", "hidden_dim": 16, "num_layers": 2, "epochs": 50,
              "learning_rate": 0.01, "l2_first_layer": 5e-4, "basis_count": 30,
              "normalization": "per-relation"},
    "bgs": {"task": "classify", "hidden_dim": 16, "num_layers": 2, "epochs": 50,
            "learning_rate": 0.01, "l2_first_layer": 5e-4, "basis_count": 40,
            "normalization": "per-relation"},
    "am": {"task": "classify", "hidden_dim": 10, "num_layers": 2, "epochs": 50,
           "learning_rate": 0.01, "l2_first_layer": 5e-4, "basis_count": 40,
           "normalization": "per-relation"},
    "fb15k": {"task": "linkpred", "embed_dim": 200, "num_layers": 1,
              "decomposition": "basis", "num_bases": 2, "dropout_self_loop": 0.2,
              "dropout_edge": 0.4, "decoder_l2": 0.01, "learning_rate": 0.01,
              "omega": 1, "normalization": "across-relations"},
    "wn18": {"task": "linkpred", "embed_dim": 200, "num_layers": 1,
             "decomposition": "basis", "num_bases": 2, "dropout_self_loop": 0.2,
             "dropout_edge": 0.4, "decoder_l2": 0.01, "learning_rate": 0.01,
             "omega": 1, "normalization": "across-relations"},
    "fb15k-237": {"task": "linkpred", "embed_dim": 500, "num_layers": 2,
                  "decomposition": "block", "block_size": 5, "dropout_self_loop": 0.2,
                  "dropout_edge": 0.4, "decoder_l2": 0.01, "learning_rate": 0.01,
                  "omega": 1, "normalization": "across-relations"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _resolve_config(preset: str, config_path, overrides: dict) -> dict:
    if preset not in PRESETS:
        raise SystemExit(_usage_error(f"unknown preset {preset!r}; "
                                      f"choose from {sorted(PRESETS)}"))
    resolved = dict(PRESETS[preset])
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                resolved.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config file {config_path}: {exc}") from exc
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _usage_error(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _make_task_config(resolved: dict):
    task = resolved.get("task")
    known = {f.name for f in dataclasses.fields(
        ClassifierConfig if task == "classify" else LinkPredConfig)}
    fields = {k: v for k, v in resolved.items() if k in known}
    unknown = set(resolved) - known - {"task"}
    if unknown:
        raise SystemExit(_usage_error(
            f"unknown config fields {sorted(unknown)}; accepted: {sorted(known)}"))
    if task == "classify":
        return ClassifierConfig(**fields)
    return LinkPredConfig(**fields)


def _write_snapshot(out_dir: Path, preset: str, dataset: str, config, extra: dict) -> dict:
    snapshot = {"package_version": __version__, "preset": preset, "dataset": dataset,
                "config": dataclasses.asdict(config), **extra}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
    return snapshot


def _write_trace(out_dir: Path, trace: list[dict]) -> None:
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for record in trace:
            fh.write(json.dumps(record) + "\n")


def cmd_train(args) -> int:
    resolved = _resolve_config(args.preset, args.config, {
        "epochs": args.epochs, "seed": args.seed, "dtype": args.precision,
        "eval_every": args.eval_every, "embed_dim": args.embed_dim,
        "val_fraction": args.val_fraction,
    })
    config = _make_task_config(resolved)
    out_dir = Path(args.out_dir)
    bundle = load_dataset(args.preset, args.data_dir)
    snapshot = _write_snapshot(out_dir, args.preset, args.preset, config,
                               {"data_dir": str(args.data_dir or default_data_dir())})

    if resolved["task"] == "classify":
        graph = bundle.build_graph("graph")
        model, trace = train_classifier(graph, bundle.labels.train, config,
                                        class_names=bundle.labels.class_names)
        test_accuracy = evaluate_accuracy(model, graph, bundle.labels.test)
        trace.append({"test_accuracy": test_accuracy})
        print(f"final train accuracy: {trace[-2]['train_accuracy']:.4f}")
        print(f"test accuracy: {test_accuracy:.4f}")
    else:
        graph = bundle.build_graph("train")
        all_triples = np.concatenate([bundle.splits["train"], bundle.splits["valid"],
                                      bundle.splits["test"]])
        filter_set = FilterSet(all_triples)
        model, trace = train_linkpred(graph, bundle.splits["valid"], config,
                                      filter_set=filter_set,
                                      log=print if args.verbose else None)
        best = max((r.get("val_filtered_mrr", -1.0) for r in trace), default=float("nan"))
        print(f"best validation filtered MRR: {best:.4f}")

    _write_trace(out_dir, trace)
    save_checkpoint(out_dir / "model.npz", model, graph=graph, config_snapshot=snapshot)
    print(f"checkpoint written to {out_dir / 'model.npz'}")
    return EXIT_OK


def _load_eval_inputs(args):
    model, meta = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.dataset, args.data_dir)
    return model, meta, bundle


def _check_linkpred_vocab(model: LinkPredModel, bundle) -> None:
    if (model.num_entities, model.num_relations) != (bundle.num_entities,
                                                     bundle.num_relations):
        raise DataError(
            f"checkpoint vocabulary ({model.num_entities} entities, "
            f"{model.num_relations} relations) does not match dataset "
            f"({bundle.num_entities}, {bundle.num_relations})")


def _report_table(aggregate: dict) -> str:
    header = f"{'':12s}{'MRR (raw)':>12s}{'MRR (filtered)':>16s}" \
             f"{'Hits@1':>10s}{'Hits@3':>10s}{'Hits@10':>10s}"
    row = (f"{'model':12s}{aggregate['raw_mrr']:>12.4f}{aggregate['filtered_mrr']:>16.4f}"
           f"{aggregate['hits@1']:>10.4f}{aggregate['hits@3']:>10.4f}"
           f"{aggregate['hits@10']:>10.4f}")
    return header + "\n" + row


def _write_linkpred_report(out_dir: Path, report: RankingReport, bundle, graph,
                           score_fn, degree_buckets) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregate = report.aggregate()
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(_report_table(aggregate) + "\n")
    by_triple: dict[tuple, dict] = {}
    for entry in report.entries:
        record = by_triple.setdefault(entry.triple, {})
        record[f"{entry.side}_raw_rank"] = entry.raw_rank
        record[f"{entry.side}_filtered_rank"] = entry.filtered_rank
    with open(out_dir / "scores.jsonl", "w", encoding="utf-8") as fh:
        for (s, r, o), ranks in by_triple.items():
            true_score = float(score_fn(np.array([[s, r, o]]), "object")[0][o])
            fh.write(json.dumps({
                "subject": bundle.entity_names[s], "relation": bundle.relation_names[r],
                "object": bundle.entity_names[o], "score": true_score, **ranks}) + "\n")
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
    if degree_buckets:
        rows = degree_bucket_mrr(report, graph, degree_buckets)
        with open(out_dir / "degree_buckets.tsv", "w", encoding="utf-8") as fh:
            fh.write("bucket_center\tcount\tmrr\n")
            for row in rows:
                mrr = "" if row["mrr"] is None else f"{row['mrr']:.6f}"
                fh.write(f"{row['center']}\t{row['count']}\t{mrr}\n")
    return aggregate


def cmd_evaluate(args) -> int:
    model, _, bundle = _load_eval_inputs(args)
    out_dir = Path(args.out_dir)
    buckets = [float(x) for x in args.degree_buckets.split(",")] if args.degree_buckets else None

    if isinstance(model, ClassifierModel):
        graph = bundle.build_graph("graph")
        if graph.num_nodes != model.stack.num_nodes:
            raise DataError(f"checkpoint was trained on {model.stack.num_nodes} nodes, "
                            f"dataset has {graph.num_nodes}")
        labels = bundle.labels.test if args.split == "test" else bundle.labels.train
        accuracy = evaluate_accuracy(model, graph, labels)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump({"split": args.split, "accuracy": accuracy}, fh, indent=2)
        print(f"{args.split} accuracy: {accuracy:.4f}")
        return EXIT_OK

    _check_linkpred_vocab(model, bundle)
    graph = bundle.build_graph("train")
    triples = bundle.splits[args.split]
    filter_set = FilterSet(np.concatenate(list(bundle.splits.values())))
    score_fn = model.candidate_score_fn(graph)
    report = evaluate_ranking(score_fn, triples, graph.num_nodes, filter_set)
    aggregate = _write_linkpred_report(out_dir, report, bundle, graph, score_fn, buckets)
    print(_report_table(aggregate))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _, bundle = _load_eval_inputs(args)
    if not isinstance(model, ClassifierModel):
        return _usage_error("predict expects a classifier checkpoint")
    graph = bundle.build_graph("graph")
    classes, probs = predict_classes(model, graph)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    class_names = model.class_names or [str(k) for k in range(model.num_classes)]
    with open(out_path, "w", encoding="utf-8") as fh:
        for node in range(graph.num_nodes):
            fh.write(json.dumps({
                "node": bundle.entity_names[node],
                "class": class_names[int(classes[node])],
                "probabilities": [round(float(p), 6) for p in probs[node]],
            }) + "\n")
    print(f"wrote {graph.num_nodes} predictions to {out_path}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    model_a, _ = load_checkpoint(args.checkpoint_rgcn)
    model_b, _ = load_checkpoint(args.checkpoint_distmult)
    if not isinstance(model_a, LinkPredModel) or not isinstance(model_b, LinkPredModel):
        return _usage_error("ensemble expects two link-prediction checkpoints")
    check_vocabulary(model_a, model_b)
    bundle = load_dataset(args.dataset, args.data_dir)
    _check_linkpred_vocab(model_a, bundle)
    alpha = EnsembleConfig(alpha=args.alpha).alpha
    graph = bundle.build_graph("train")
    combined = ensemble_candidate_score_fn(model_a.candidate_score_fn(graph),
                                           model_b.candidate_score_fn(graph), alpha)
    triples = bundle.splits[args.split]
    filter_set = FilterSet(np.concatenate(list(bundle.splits.values())))
    report = evaluate_ranking(combined, triples, graph.num_nodes, filter_set)
    out_dir = Path(args.out_dir)
    buckets = [float(x) for x in args.degree_buckets.split(",")] if args.degree_buckets else None
    aggregate = _write_linkpred_report(out_dir, report, bundle, graph, combined, buckets)
    print(_report_table(aggregate))
    return EXIT_OK


# --- gradcheck ---------------------------------------------------------------

def gradcheck_suite(dtype=np.float64, seed: int = 7) -> dict[str, float]:
    """Finite-difference checks for both task losses on a small synthetic
    graph, one entry per parameter group. Used by the gradcheck command and
    the acceptance suite."""
    from .classify import ClassifierConfig as CC, LabelSet, build_classifier_stack
    from .encoder import DropoutPolicy

    rng = np.random.default_rng(seed)
    num_nodes, num_relations = 8, 3
    triples = np.column_stack([rng.integers(0, num_nodes, 14),
                               rng.integers(0, num_relations, 14),
                               rng.integers(0, num_nodes, 14)])
    graph = build_graph(triples, num_nodes, num_relations)
    results: dict[str, float] = {}

    # classification loss, full decomposition
    labels = LabelSet(np.array([0, 2, 5]), np.array([0, 1, 2]), num_classes=3)
    config = CC(hidden_dim=4, num_layers=2, basis_count=0, l2_first_layer=1e-3,
                seed=seed, dtype=np.dtype(dtype).name)
    stack = build_classifier_stack(graph, 3, config)
    norm = normalization(graph, "per-relation")
    prop = Propagation(graph, norm)

    def classify_loss():
        loss = classification_loss(stack.forward(prop), labels)
        for _, p in stack.first_layer_parameters():
            loss = ad.add(loss, ad.scale(ad.l2_norm_sq(p), config.l2_first_layer))
        return loss

    for name, param in stack.parameters():
        results[f"classify/{name}"] = finite_difference_check(
            classify_loss, [param], rng=np.random.default_rng(seed + 1))

    # link-prediction loss: basis encoder with a pinned dropout mask
    lcfg = LinkPredConfig(embed_dim=5, num_layers=1, decomposition="basis", num_bases=2,
                          dropout_self_loop=0.2, dropout_edge=0.3, decoder_l2=0.01,
                          seed=seed, dtype=np.dtype(dtype).name)
    model = build_linkpred_model(graph, lcfg)
    norm_lp = normalization(graph, "across-relations")
    train_prop = Propagation.for_training(graph, norm_lp, model.stack.dropout, epoch_seed=0)
    positives = triples[:6]
    negatives = corrupt_batch(positives, num_nodes, omega=1,
                              rng=np.random.default_rng(seed + 2))

    def linkpred_basis_loss():
        embeddings = model.stack.forward(train_prop)
        return linkpred_loss(embeddings, model.diagonals, positives, negatives,
                             decoder_l2=lcfg.decoder_l2)

    for name, param in model.parameters():
        results[f"linkpred-basis/{name}"] = finite_difference_check(
            linkpred_basis_loss, [param], rng=np.random.default_rng(seed + 3))

    # link-prediction loss: block encoder behind a projection input
    bcfg = LinkPredConfig(embed_dim=6, num_layers=2, decomposition="block", block_size=3,
                          dropout_self_loop=0.0, dropout_edge=0.0, decoder_l2=0.01,
                          seed=seed, dtype=np.dtype(dtype).name)
    bmodel = build_linkpred_model(graph, bcfg)
    bprop = Propagation(graph, norm_lp)

    def linkpred_block_loss():
        embeddings = bmodel.stack.forward(bprop)
        return linkpred_loss(embeddings, bmodel.diagonals, positives, negatives,
                             decoder_l2=bcfg.decoder_l2)

    for name, param in bmodel.parameters():
        results[f"linkpred-block/{name}"] = finite_difference_check(
            linkpred_block_loss, [param], rng=np.random.default_rng(seed + 4))
    return results


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.precision == "float64" else np.float32
    threshold = 1e-4 if args.precision == "float64" else 1e-2
    step = 1e-5 if args.precision == "float64" else 1e-2
    del step  # finite_difference_check picks its own step for float64 runs
    results = gradcheck_suite(dtype=dtype)
    worst = 0.0
    for name in sorted(results):
        err = results[name]
        worst = max(worst, err)
        flag = "ok" if err < threshold else "FAIL"
        print(f"{name:45s} max rel err {err:.3e}  {flag}")
    print(f"worst: {worst:.3e} (threshold {threshold:g})")
    return EXIT_OK if worst < threshold else EXIT_NUMERICAL


def cmd_stats(args) -> int:
    bundle = load_dataset(args.dataset, args.data_dir)
    actual = bundle.stats()
    for key in sorted(actual):
        print(f"{key}: {actual[key]}")
    if bundle.removed_triples:
        total = sum(bundle.removed_triples.values())
        print(f"label-leak triples removed: {total}")
        for rel, count in sorted(bundle.removed_triples.items()):
            print(f"  {rel}: {count}")
    diff = validate_stats(bundle, expected_stats(args.dataset))
    print(str(diff))
    return EXIT_OK if diff.passed else EXIT_DATA


def build_parser() -> _Parser:
    parser = _Parser(prog="rgcn", description=__doc__)
    parser.add_argument("--data-dir", default=None,
                        help="dataset root (default: $RGCN_DATA_DIR or ./data)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a dataset preset")
    train.add_argument("--preset", required=True, choices=sorted(PRESETS),
                       help="dataset preset; encodes the published hyperparameters")
    train.add_argument("--config", default=None, help="JSON file overriding config fields")
    train.add_argument("--out-dir", default="runs/latest")
    train.add_argument("--epochs", type=int, default=None,
                       help="override epochs (classify presets: 50; "
                            "linkpred: default (unspecified) 500)")
    train.add_argument("--embed-dim", type=int, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--eval-every", type=int, default=None)
    train.add_argument("--val-fraction", type=float, default=None,
                       help="classification validation share (default 0.2; "
                            "0 retrains on all labels)")
    train.add_argument("--precision", choices=["float64", "float32"], default=None)
    train.add_argument("--verbose", action="store_true")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--split", default="test")
    evaluate.add_argument("--out-dir", default="runs/eval")
    evaluate.add_argument("--degree-buckets", default=None,
                          help="comma-separated bucket edges for the degree table")
    evaluate.set_defaults(func=cmd_evaluate)

    predict = sub.add_parser("predict", help="dump per-node class predictions")
    predict.add_argument("checkpoint")
    predict.add_argument("--dataset", required=True)
    predict.add_argument("--out", default="predictions.jsonl")
    predict.set_defaults(func=cmd_predict)

    ensemble = sub.add_parser("ensemble", help="score-level ensemble of two checkpoints")
    ensemble.add_argument("checkpoint_rgcn")
    ensemble.add_argument("checkpoint_distmult")
    ensemble.add_argument("--alpha", type=float, default=0.4)
    ensemble.add_argument("--dataset", required=True)
    ensemble.add_argument("--split", default="test")
    ensemble.add_argument("--out-dir", default="runs/ensemble")
    ensemble.add_argument("--degree-buckets", default=None)
    ensemble.set_defaults(func=cmd_ensemble)

    gradcheck = sub.add_parser("gradcheck", help="finite-difference check of both losses")
    gradcheck.add_argument("--precision", choices=["float64", "float32"], default="float64")
    gradcheck.set_defaults(func=cmd_gradcheck)

    stats = sub.add_parser("stats", help="dataset statistics vs expected counts")
    stats.add_argument("dataset")
    stats.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
