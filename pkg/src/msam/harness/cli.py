"""Command-line orchestration.

Subcommands: gen-data, select-synonyms, train, eval, quantify, report.
Every run directory carries a manifest (seed, config hash, histories) that
makes the run reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import metrics as mt
from .. import quant, synsel, textenc, training
from ..attention import BaselineClassifier, ChunkClassifier
from ..synsel import SynonymRecord
from ..textenc import Vocabulary, documents_from_records
from . import datagen, modelio, reports
from .config import Config, load_config
from .datagen import CorpusSpec


def _load_documents(path, vocab, code_index):
    return documents_from_records(textenc.read_corpus(path), vocab, code_index)


def _code_index(codebook):
    return {rec.code: i for i, rec in enumerate(codebook)}


def cmd_gen_data(args) -> int:
    spec_values = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    known = {f.name for f in fields(CorpusSpec)}
    unknown = set(spec_values) - known
    if unknown:
        raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
    spec = CorpusSpec(**spec_values)
    corpus = datagen.write_dataset(args.out, spec)
    out = Path(args.out)

    vocab = Vocabulary.load(out / "vocab.txt")
    codebook = synsel.read_codebook(out / "codebook.jsonl", normalize=False)
    code_index = _code_index(codebook)
    valid_docs = documents_from_records(corpus["valid"], vocab, code_index)
    test_docs = documents_from_records(corpus["test"], vocab, code_index)
    quant.write_groups(out / "valid_groups.jsonl",
                       quant.sample_groups(valid_docs, args.valid_groups,
                                           spec.num_codes, seed=spec.seed + 1))
    quant.write_groups(out / "test_groups.jsonl",
                       quant.sample_groups(test_docs, args.test_groups,
                                           spec.num_codes, seed=spec.seed + 2))
    print(f"wrote dataset to {out}: {spec.n_train} train / {spec.n_valid} valid "
          f"/ {spec.n_test} test documents, {spec.num_codes} codes")
    return 0


def cmd_select_synonyms(args) -> int:
    codebook = synsel.read_codebook(args.codebook)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = Vocabulary.from_texts(v for rec in codebook for v in rec.variants)
    encoder = textenc.EncoderParams.init(
        vocab_size=len(vocab), hidden=args.hidden, heads=args.heads,
        max_len=args.chunk_len, num_blocks=1, seed=args.seed)
    selection = {"exact": "diverse", "greedy": "greedy",
                 "random": "random"}[args.mode]
    rng = np.random.default_rng(args.seed) if selection == "random" else None
    embeddings = synsel.build_code_embeddings(codebook, encoder, vocab, args.m,
                                              selection=selection, rng=rng)
    synsel.write_selection_report(args.out, embeddings)
    print(f"wrote selection report for {embeddings.num_codes} codes to {args.out}")
    return 0


def _build_model(config: Config, kind: str, vocab, codebook):
    if kind == "ce-msam":
        return ChunkClassifier.build(
            vocab, codebook, hidden=config.hidden, heads=config.heads,
            synonyms=config.synonyms, chunk_len=config.chunk_len,
            overlap=config.overlap, num_blocks=config.encoder_blocks,
            seed=config.seed)
    return BaselineClassifier.build(
        vocab, hidden=config.hidden, heads=config.heads,
        num_codes=config.num_codes, chunk_len=config.chunk_len,
        num_blocks=config.encoder_blocks, seed=config.seed)


def _quant_evaluator(valid_docs, valid_groups, num_codes):
    """Validation MSE of refined running estimates, for joint training."""
    def evaluate(model, refiner) -> float:
        probs_by_id = {d.id: model.proba(d.tokens) for d in valid_docs}
        errs = []
        for g in valid_groups:
            pcc = quant.pcc_estimate(quant.group_probabilities(g, probs_by_id))
            refined = quant.refine(pcc, refiner)
            errs.append(float(np.mean((refined - g.prevalence) ** 2)))
        return float(np.mean(errs))
    return evaluate


def cmd_train(args) -> int:
    config = load_config(args.config).apply_env_overrides()
    vocab = Vocabulary.load(config.vocab_path)
    codebook = synsel.read_codebook(config.codebook_path, normalize=False)
    if len(codebook) != config.num_codes:
        raise ValueError(f"codebook has {len(codebook)} codes but config says "
                         f"{config.num_codes}")
    code_index = _code_index(codebook)
    train_docs = _load_documents(config.train_path, vocab, code_index)
    valid_docs = _load_documents(config.valid_path, vocab, code_index)

    model = _build_model(config, args.model, vocab, codebook)
    frozen_before = (model.code_embeddings.state_hash()
                     if args.model == "ce-msam" else None)

    history = training.train_classifier_two_stage(
        model, train_docs, valid_docs,
        lr_stage1=config.lr_stage1, lr_stage2=config.lr_stage2,
        patience=config.patience, max_epochs=config.max_epochs,
        batch_size=config.batch_size, seed=config.seed,
        calibration_bins=config.calibration_bins)

    refiner = None
    if args.quant != "none":
        config.quant_loss_kind = args.quant
        valid_groups = quant.sample_groups(valid_docs, args.quant_groups,
                                           config.num_codes,
                                           seed=config.seed + 1)
        probs_by_id = {d.id: model.proba(d.tokens) for d in valid_docs}
        refiner = quant.Refiner.init(config.num_codes, config.mlp_hidden,
                                     seed=config.seed)
        history["refiner"] = quant.train_refiner_standalone(
            refiner, valid_groups, probs_by_id, lr0=config.lr_refiner,
            patience=config.patience, max_epochs=config.max_epochs,
            batch_size=config.batch_size, seed=config.seed + 2)
        loss_cfg = training.LossConfig(quant_lambda=config.quant_lambda,
                                       huber_delta=config.huber_delta,
                                       quant_loss_kind=args.quant)
        history["joint"] = training.train_joint(
            model, refiner, train_docs, loss_cfg,
            _quant_evaluator(valid_docs, valid_groups, config.num_codes),
            lr0=config.lr_joint, patience=config.patience,
            max_epochs=config.max_epochs, batch_size=config.batch_size,
            seed=config.seed + 3)

    if frozen_before is not None:
        if model.code_embeddings.state_hash() != frozen_before:
            raise RuntimeError("frozen code embeddings changed during training")

    batch = training.predictions_batch(model, valid_docs, config.num_codes)
    final = reports.classification_report(
        batch, precision_cutoff=config.precision_cutoff,
        bins=config.calibration_bins)
    modelio.save_model(
        args.out, model, config, refiner=refiner, history=history,
        metrics=final,
        selection_report=(model.code_embeddings.selection_report()
                          if args.model == "ce-msam" else None))
    print(f"trained {args.model} (quant={args.quant}); validation micro-F1 "
          f"{final['micro_f1']:.3f}, MECE {final['mece']:.4f}; saved to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _, config, manifest = modelio.load_model(args.model)
    code_index = {c: i for i, c in enumerate(manifest["codes"])}
    docs = _load_documents(args.corpus, model.vocab, code_index)
    batch = training.predictions_batch(model, docs, len(manifest["codes"]))
    report = reports.write_metrics_report(
        args.report, batch, precision_cutoff=config.precision_cutoff,
        bins=config.calibration_bins, class_names=manifest["codes"])
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_quantify(args) -> int:
    model, refiner, config, manifest = modelio.load_model(args.model)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = set(methods) - {"cc", "pcc", "mlp"}
    if unknown:
        raise ValueError(f"unknown quantification methods: {sorted(unknown)}")
    if "mlp" in methods and refiner is None:
        raise ValueError("model was trained without a refiner; drop 'mlp' or "
                         "train with --quant")
    code_index = {c: i for i, c in enumerate(manifest["codes"])}
    corpus_path = args.corpus or config.test_path
    docs = _load_documents(corpus_path, model.vocab, code_index)
    docs_by_id = {d.id: d for d in docs}
    groups = quant.read_groups(args.groups, docs_by_id, len(manifest["codes"]))

    needed = {i for g in groups for i in g.ids}
    probs_by_id = {i: model.proba(docs_by_id[i].tokens) for i in sorted(needed)}

    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    per_method: dict[str, tuple[list, list, list]] = {m: ([], [], []) for m in methods}
    for gi, group in enumerate(groups):
        probs = quant.group_probabilities(group, probs_by_id)
        estimates = {}
        if "cc" in methods:
            estimates["cc"] = quant.cc_estimate(probs)
        if "pcc" in methods:
            estimates["pcc"] = quant.pcc_estimate(probs)
        if "mlp" in methods:
            estimates["mlp"] = quant.refine(quant.pcc_estimate(probs), refiner)
        for method, est in estimates.items():
            per_method[method][0].append(est)
            per_method[method][1].append(group.prevalence)
            per_method[method][2].append(group.size)
            for l, value in enumerate(est):
                rows.append({"group_id": gi, "method": method,
                             "class": manifest["codes"][l],
                             "estimate": float(value),
                             "truth": float(group.prevalence[l])})
    reports.write_estimates_csv(out / "estimates.csv", rows)
    summary = reports.quant_method_summary(per_method)
    reports.write_quant_summary(out / "quant_summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    run_reports = {}
    for run in args.runs:
        run_path = Path(run)
        for candidate in ("metrics.json", "quant_summary.json"):
            path = run_path / candidate
            if path.exists():
                loaded = json.loads(path.read_text(encoding="utf-8"))
                if candidate == "quant_summary.json":
                    flat = {f"{method}_{key}": value
                            for method, entry in loaded.items()
                            for key, value in entry.items()}
                    run_reports[run_path.name] = flat
                else:
                    run_reports[run_path.name] = loaded
                break
        else:
            raise FileNotFoundError(f"{run}: no metrics.json or "
                                    "quant_summary.json")
    reports.write_comparison_csv(args.out, run_reports)
    print(f"wrote comparison of {len(run_reports)} runs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msam",
        description="Long-document multi-label classification and "
                    "quantification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="corpus spec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--valid-groups", type=int, default=5000)
    p.add_argument("--test-groups", type=int, default=1000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("select-synonyms",
                       help="diversity-select synonyms per code")
    p.add_argument("--codebook", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--mode", choices=("exact", "greedy", "random"),
                   default="exact",
                   help="exact falls back to greedy past the exact-size limit; "
                        "the report records the mode used per code")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--chunk-len", type=int, default=512)
    p.set_defaults(func=cmd_select_synonyms)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--model", choices=("bm", "ce-msam"), default="ce-msam")
    p.add_argument("--quant", choices=("none", "mse", "huber"), default="none")
    p.add_argument("--quant-groups", type=int, default=5000,
                   help="validation groups sampled for the refiner")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a corpus")
    p.add_argument("--model", required=True, help="run directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True, help="report output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantify", help="estimate prevalence over groups")
    p.add_argument("--model", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--methods", default="cc,pcc,mlp")
    p.add_argument("--report", required=True)
    p.add_argument("--corpus", default=None,
                   help="defaults to the config's test corpus")
    p.set_defaults(func=cmd_quantify)

    p = sub.add_parser("report", help="tabulate metrics across runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
