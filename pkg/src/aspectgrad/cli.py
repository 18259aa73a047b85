"""Command-line surface: data generation, training, evaluation, explanation
export, ablation sweeps and robustness runs.

Every command resolves its configuration as defaults < config file < flags
and snapshots the result into the run directory, so a run is reproducible
from its snapshot alone.  Exit codes: 0 success, 2 config error, 3 IO error,
4 data error, 5 checkpoint error, 6 transform inapplicable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    Corpus,
    DataError,
    SchemaError,
    SyntheticSpec,
    add_diff,
    build_vocabulary,
    generate_synthetic,
    group_by_sentence,
    load_corpus_dir,
    rev_non,
    save_jsonl,
)
from .metrics import MetricError, RankingPolicy, accuracy_and_macro_f1, evaluate, write_details_jsonl
from .model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    Parameters,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .attribution import export_saliency_jsonl, saliency
from .training import TrainConfig, train
from .data import encode_tokens

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_TRANSFORM = 6

RUN_ROOT_ENV = "ASPECTGRAD_RUN_ROOT"


class ConfigError(ValueError):
    pass


class TransformInapplicable(ValueError):
    pass


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err
    if not isinstance(record, dict):
        raise ConfigError("config file must hold a flat JSON object")
    return record


def _resolve(dataclass_type, file_values: dict, flag_values: dict):
    """defaults < config file < explicit flags, restricted to known fields."""
    names = {f.name for f in dataclasses.fields(dataclass_type)}
    merged = {}
    for source in (file_values, flag_values):
        for key, value in source.items():
            if key in names and value is not None:
                merged[key] = value
    try:
        return dataclass_type(**merged).validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def _run_dir(args) -> Path:
    if args.run is not None:
        return Path(args.run)
    root = os.environ.get(RUN_ROOT_ENV)
    if not root:
        raise ConfigError("no --run given and ASPECTGRAD_RUN_ROOT is not set")
    return Path(root) / time.strftime("run-%Y%m%d-%H%M%S")


def _snapshot(run_dir: Path, record: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    file_values = _load_config_file(args.config)
    flag_values = {
        "n_train": args.n_train, "n_valid": args.n_valid, "n_test": args.n_test,
        "aspects_per_sentence": args.aspects_per_sentence,
        "distractor_prob": args.distractor_prob, "seed": args.seed,
    }
    spec = _resolve(SyntheticSpec, file_values, flag_values)
    corpus = generate_synthetic(spec)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, examples in corpus.splits.items():
            save_jsonl(examples, out / f"{name}.jsonl")
        manifest = {
            "seed": spec.seed,
            "counts": {name: len(exs) for name, exs in corpus.splits.items()},
            "vocabulary_size": len(corpus.vocabulary),
            "spec": {
                "n_train": spec.n_train, "n_valid": spec.n_valid,
                "n_test": spec.n_test,
                "aspects_per_sentence": spec.aspects_per_sentence,
                "distractor_prob": spec.distractor_prob,
            },
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as err:
        return _fail(f"cannot write to {out}: {err}", EXIT_IO)
    print(f"wrote {sum(len(e) for e in corpus.splits.values())} examples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_once(corpus: Corpus, train_config: TrainConfig, model_opts: dict):
    model_config = ModelConfig(
        vocab_size=len(corpus.vocabulary),
        embed_dim=model_opts.get("embed_dim", 32),
        hidden_dim=model_opts.get("hidden_dim", 32),
        max_len=model_opts.get("max_len", 64),
        init_seed=train_config.seed,
    ).validate()
    return train(corpus, train_config, model_config)


def cmd_train(args) -> int:
    file_values = _load_config_file(args.config)
    flag_values = {
        "gradient_weight": args.gradient_weight,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "seed": args.seed,
        "correction_mode": args.correction_mode,
        "annotated_fraction": args.annotated_fraction,
    }
    train_config = _resolve(TrainConfig, file_values, flag_values)
    model_opts = {k: file_values[k] for k in ("embed_dim", "hidden_dim", "max_len")
                  if k in file_values}
    for name in ("embed_dim", "hidden_dim", "max_len"):
        value = getattr(args, name)
        if value is not None:
            model_opts[name] = value

    run_dir = _run_dir(args)
    try:
        corpus = load_corpus_dir(args.data)
    except (OSError, SchemaError, DataError) as err:
        return _fail(str(err), EXIT_DATA)

    try:
        _snapshot(run_dir, {"command": "train", "data": str(args.data),
                            **train_config.to_dict(), **model_opts})
    except OSError as err:
        return _fail(f"cannot write run directory: {err}", EXIT_IO)

    try:
        params, history = _train_once(corpus, train_config, model_opts)
    except (ValueError, ModelError) as err:
        return _fail(str(err), EXIT_DATA)

    try:
        with open(run_dir / "history.csv", "w", encoding="utf-8") as fh:
            fh.write(history.to_csv())
        save_checkpoint(params, run_dir / "checkpoint-best.json", corpus.vocabulary)
        save_checkpoint(params, run_dir / "checkpoint-final.json", corpus.vocabulary)
    except OSError as err:
        return _fail(f"cannot write run artifacts: {err}", EXIT_IO)

    last = history.entries[-1]
    best = max(history.entries, key=lambda e: e.valid_accuracy)
    print(f"run directory: {run_dir}")
    print(f"final epoch {last.epoch}: valid_accuracy={last.valid_accuracy:.4f} "
          f"valid_hit_rate={last.valid_hit_rate:.4f}")
    print(f"best epoch {best.epoch}: valid_accuracy={best.valid_accuracy:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_model_and_split(args):
    params, vocabulary = load_checkpoint(args.checkpoint)
    if vocabulary is None:
        raise CheckpointError(
            f"{args.checkpoint}: checkpoint carries no vocabulary; cannot "
            "encode evaluation data consistently")
    corpus = load_corpus_dir(args.data)
    split = corpus.splits.get(args.split)
    if split is None:
        raise DataError(f"split {args.split!r} not found under {args.data}")
    return params, vocabulary, split


def cmd_eval(args) -> int:
    try:
        params, vocabulary, split = _load_model_and_split(args)
    except CheckpointError as err:
        return _fail(str(err), EXIT_CHECKPOINT)
    except (OSError, SchemaError, DataError) as err:
        return _fail(str(err), EXIT_DATA)

    policy = RankingPolicy(exclude_aspect_tokens=not args.include_aspect, k=args.k)
    try:
        report = evaluate(params, split, vocabulary, policy)
    except MetricError as err:
        return _fail(str(err), EXIT_DATA)

    if args.details is not None:
        write_details_jsonl(params, split, vocabulary, policy, args.details)
    if args.json:
        print(report.to_json())
    else:
        print(report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

HEAT_GLYPHS = " .:*#"


def heat_bucket(alpha: float, alpha_max: float) -> int:
    """Map an attribution to one of 5 intensity buckets; the max is darkest."""
    if alpha_max <= 0:
        return 0
    return min(4, int(alpha / alpha_max * 5))


def render_text_heatmap(saliency_map, example) -> str:
    alpha_max = float(saliency_map.alpha.max())
    aspect = example.aspect_indices
    gold = set(example.opinion_indices)
    words = []
    shades = []
    for i, token in enumerate(example.tokens):
        text = token
        if i in gold:
            text = f"_{text}_"
        if i in aspect:
            text = f"[{text}]"
        bucket = heat_bucket(float(saliency_map.alpha[i]), alpha_max)
        words.append(text)
        shades.append(HEAT_GLYPHS[bucket] * max(1, len(text)))
    header = (f"id={example.id} gold={example.polarity} "
              f"pred={saliency_map.predicted_label}")
    line1 = " ".join(words)
    line2 = " ".join(shades[i].ljust(len(words[i])) for i in range(len(words)))
    return f"{header}\n{line1}\n{line2}\n"


def render_html_heatmap(pairs) -> str:
    """Standalone HTML document (inline styles, no external assets)."""
    body = []
    for saliency_map, example in pairs:
        alpha_max = float(saliency_map.alpha.max())
        aspect = example.aspect_indices
        gold = set(example.opinion_indices)
        spans = []
        for i, token in enumerate(example.tokens):
            bucket = heat_bucket(float(saliency_map.alpha[i]), alpha_max)
            opacity = (bucket + 1) / 5 * 0.8
            text = f"[{token}]" if i in aspect else token
            if i in gold:
                text = f"<u>{text}</u>"
            spans.append(
                f'<span style="background: rgba(214, 39, 40, {opacity:.2f}); '
                f'padding: 1px 2px; margin: 1px;">{text}</span>')
        body.append(
            f'<p><b>{example.id}</b> gold={example.polarity} '
            f'pred={saliency_map.predicted_label}<br>{" ".join(spans)}</p>')
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            "<title>attribution heatmaps</title></head>\n"
            "<body style=\"font-family: monospace;\">\n"
            + "\n".join(body) + "\n</body></html>\n")


def cmd_explain(args) -> int:
    try:
        params, vocabulary, split = _load_model_and_split(args)
    except CheckpointError as err:
        return _fail(str(err), EXIT_CHECKPOINT)
    except (OSError, SchemaError, DataError) as err:
        return _fail(str(err), EXIT_DATA)

    if args.example_id is not None:
        split = [ex for ex in split if ex.id == args.example_id]
        if not split:
            return _fail(f"unknown example id {args.example_id!r}", EXIT_DATA)

    pairs = [(saliency(ex, params, vocabulary), ex) for ex in split]
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        if args.format == "text":
            out.write_text("\n".join(render_text_heatmap(m, ex) for m, ex in pairs),
                           encoding="utf-8")
        else:
            out.write_text(render_html_heatmap(pairs), encoding="utf-8")
        if args.saliency_jsonl is not None:
            export_saliency_jsonl([m for m, _ in pairs], args.saliency_jsonl)
    except OSError as err:
        return _fail(f"cannot write {out}: {err}", EXIT_IO)
    print(f"wrote {len(pairs)} heatmap(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    if (args.fractions is None) == (args.lambdas is None):
        return _fail("pass exactly one of --fractions or --lambdas", EXIT_CONFIG)
    file_values = _load_config_file(args.config)
    base = _resolve(TrainConfig, file_values, {
        "learning_rate": args.learning_rate, "batch_size": args.batch_size,
        "epochs": args.epochs, "correction_mode": args.correction_mode,
        "gradient_weight": args.gradient_weight,
        "annotated_fraction": args.annotated_fraction,
    })
    model_opts = {k: file_values[k] for k in ("embed_dim", "hidden_dim", "max_len")
                  if k in file_values}
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
        if args.fractions is not None:
            sweep_name = "fraction"
            settings = [float(v) for v in args.fractions.split(",")]
        else:
            sweep_name = "lambda"
            settings = [float(v) for v in args.lambdas.split(",")]
    except ValueError as err:
        return _fail(f"bad sweep values: {err}", EXIT_CONFIG)

    run_dir = _run_dir(args)
    try:
        corpus = load_corpus_dir(args.data)
    except (OSError, SchemaError, DataError) as err:
        return _fail(str(err), EXIT_DATA)
    test_split = corpus.splits.get("test") or corpus.splits.get("valid")
    if test_split is None:
        return _fail("ablation needs a test or valid split", EXIT_DATA)

    try:
        _snapshot(run_dir, {"command": "ablate", "sweep": sweep_name,
                            "settings": settings, "seeds": seeds,
                            "data": str(args.data), **base.to_dict(), **model_opts})
    except OSError as err:
        return _fail(f"cannot write run directory: {err}", EXIT_IO)

    rows = []
    for setting in settings:
        for seed in seeds:
            overrides = {"seed": seed}
            if sweep_name == "fraction":
                overrides["annotated_fraction"] = setting
            else:
                overrides["gradient_weight"] = setting
            config = dataclasses.replace(base, **overrides).validate()
            params, _ = _train_once(corpus, config, model_opts)
            report = evaluate(params, test_split, corpus.vocabulary,
                              RankingPolicy(k=args.k))
            rows.append([setting, seed, report.accuracy, report.macro_f1,
                         report.mrr, report.hit_rate, report.aopc,
                         report.post_hoc_accuracy])
            print(f"{sweep_name}={setting} seed={seed}: acc={report.accuracy:.4f} "
                  f"hr@{args.k}={report.hit_rate:.4f}")

    try:
        with open(run_dir / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([sweep_name, "seed", "acc", "f1", "mrr", "hr",
                             "aopc", "ph_acc"])
            for row in rows:
                writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])
    except OSError as err:
        return _fail(f"cannot write sweep CSV: {err}", EXIT_IO)
    print(f"sweep CSV: {run_dir / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# robustness
# ---------------------------------------------------------------------------


def transform_split(examples, transform: str, seed: int):
    """Apply adddiff/revnon to a split; returns (transformed, changed count)."""
    rng = np.random.default_rng(seed)
    changed = 0
    out = []
    if transform == "adddiff":
        for ex in examples:
            try:
                out.append(add_diff(ex, rng))
                changed += 1
            except DataError:
                out.append(ex)
        return out, changed
    if transform == "revnon":
        groups = group_by_sentence(examples)
        for ex in examples:
            new, did_change = rev_non(ex, groups[tuple(ex.tokens)], rng)
            out.append(new)
            changed += int(did_change)
        return out, changed
    raise ConfigError(f"unknown transform {transform!r}")


def cmd_robustness(args) -> int:
    try:
        params, vocabulary, split = _load_model_and_split(args)
    except CheckpointError as err:
        return _fail(str(err), EXIT_CHECKPOINT)
    except (OSError, SchemaError, DataError) as err:
        return _fail(str(err), EXIT_DATA)

    try:
        transformed, changed = transform_split(split, args.transform, args.seed)
    except ConfigError as err:
        return _fail(str(err), EXIT_CONFIG)
    if changed == 0:
        return _fail(f"transform {args.transform!r} left every example unchanged",
                     EXIT_TRANSFORM)

    def acc_f1(examples):
        predictions = []
        golds = []
        for ex in examples:
            label, _ = predict(encode_tokens(ex.tokens, vocabulary),
                               ex.aspect_span, params)
            predictions.append(label)
            golds.append(ex.polarity)
        return accuracy_and_macro_f1(predictions, golds)

    acc_orig, f1_orig = acc_f1(split)
    acc_new, f1_new = acc_f1(transformed)
    record = {
        "transform": args.transform,
        "seed": args.seed,
        "changed_examples": changed,
        "n_examples": len(split),
        "original": {"accuracy": acc_orig, "macro_f1": f1_orig},
        "transformed": {"accuracy": acc_new, "macro_f1": f1_new},
        "delta": {"accuracy": acc_new - acc_orig, "macro_f1": f1_new - f1_orig},
    }
    if args.json:
        print(json.dumps(record, indent=2))
    else:
        print(f"transform={args.transform} changed={changed}/{len(split)}")
        print(f"original:    accuracy={acc_orig:.4f} macro_f1={f1_orig:.4f}")
        print(f"transformed: accuracy={acc_new:.4f} macro_f1={f1_new:.4f}")
        print(f"delta:       accuracy={acc_new - acc_orig:+.4f} "
              f"macro_f1={f1_new - f1_orig:+.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aspectgrad",
        description="Aspect-level sentiment classification with "
                    "gradient-supervised saliency")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-valid", dest="n_valid", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--aspects-per-sentence", dest="aspects_per_sentence", type=int)
    p.add_argument("--distractor-prob", dest="distractor_prob", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--run", help=f"run directory (default under ${RUN_ROOT_ENV})")
    p.add_argument("--config")
    p.add_argument("--gradient-weight", "--lambda", dest="gradient_weight", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--correction-mode", dest="correction_mode",
                   choices=["second_order", "detached"])
    p.add_argument("--annotated-fraction", dest="annotated_fraction", type=float)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--include-aspect", action="store_true",
                   help="let aspect tokens into rankings")
    p.add_argument("--details", help="write per-example JSONL detail dump here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="render attribution heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--example-id", dest="example_id")
    p.add_argument("--format", choices=["text", "html"], default="text")
    p.add_argument("--out", required=True)
    p.add_argument("--saliency-jsonl", dest="saliency_jsonl")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="sweep annotation fractions or loss weights")
    p.add_argument("--data", required=True)
    p.add_argument("--run")
    p.add_argument("--config")
    p.add_argument("--fractions", help="comma list, e.g. 0.1,0.2,0.5,1.0")
    p.add_argument("--lambdas", help="comma list of correction-loss weights")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--gradient-weight", dest="gradient_weight", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--correction-mode", dest="correction_mode",
                   choices=["second_order", "detached"])
    p.add_argument("--annotated-fraction", dest="annotated_fraction", type=float)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robustness", help="compare a checkpoint on original "
                                          "vs transformed data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--transform", choices=["adddiff", "revnon"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_robustness)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        return _fail(str(err), EXIT_CONFIG)
    except TransformInapplicable as err:
        return _fail(str(err), EXIT_TRANSFORM)
    except CheckpointError as err:
        return _fail(str(err), EXIT_CHECKPOINT)
    except (SchemaError, DataError) as err:
        return _fail(str(err), EXIT_DATA)
    except OSError as err:
        return _fail(str(err), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
