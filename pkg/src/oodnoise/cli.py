"""Command-line interface.

Subcommands: gen-data, inject-noise, train, extract, fit, score, evaluate,
benchmark, report. Exit codes: 0 success, 2 configuration error, 3 run
completed with partial failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import detectors as det
from . import harness, metrics, mlp, noise, synth, tensorio


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text in ("true", "false"):
        return text == "true"
    return text


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key] = _coerce(value)
    return out


def _cmd_gen_data(args) -> int:
    if args.spec == "default":
        spec = synth.default_mixture_spec(seed=args.seed or 0)
    else:
        spec = synth.mixture_spec_from_json(json.loads(Path(args.spec).read_text()))
        if args.seed is not None:
            spec.seed = args.seed
    split = synth.generate(spec)
    tensorio.write_split_set(split, args.out)
    print(f"wrote split set {spec.name!r} to {args.out}")
    return 0


def _cmd_inject_noise(args) -> int:
    transition = None
    if args.transition:
        transition = noise.TransitionMatrix(
            np.asarray(json.loads(Path(args.transition).read_text())))
    noisy_labels = None
    if args.labels_json:
        noisy_labels = np.asarray(json.loads(Path(args.labels_json).read_text()))
    spec = noise.NoiseSpec(model=args.model, rate=args.rate, transition=transition,
                           noisy_labels=noisy_labels, seed=args.seed or 0)
    noisy = noise.attach_noisy_labels(args.bundle, spec, args.tag)
    bundle = tensorio.read_bundle(args.bundle, validate=False)
    flipped = int((noisy != bundle.labels).sum())
    print(f"wrote {noise.noisy_label_key(args.tag)} ({flipped}/{len(noisy)} flipped)")
    return 0


def _cmd_train(args) -> int:
    split = tensorio.read_split_set(args.data)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    num_classes = int(split.train.labels.max()) + 1
    spec = mlp.MlpSpec(input_dim=int(split.train.features.shape[1]),
                       hidden_dims=hidden, num_classes=num_classes,
                       seed=args.seed or 0)
    label_key = args.noisy_key or tensorio.KEY_LABELS
    pair = mlp.train(spec, split.train, split.val, epochs=args.epochs,
                     lr=args.lr, batch=args.batch, train_label_key=label_key)
    out = Path(args.out)
    mlp.save_model(pair.early, out / "early")
    mlp.save_model(pair.last, out / "last")
    print(f"early checkpoint: epoch {pair.early.epoch} "
          f"(val acc {pair.early.training_log['val_acc'][pair.early.epoch - 1]:.4f}); "
          f"last: epoch {pair.last.epoch}")
    return 0


def _cmd_extract(args) -> int:
    model = mlp.load_model(args.model)
    bundle = tensorio.read_bundle(args.bundle)
    trace = mlp.export_bundle(model, bundle, include_layers=not args.no_layers)
    tensorio.write_bundle(trace, args.out)
    print(f"wrote trace bundle to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    model = mlp.load_model(args.model) if args.model else None
    ctx = det.FitContext(
        id_train=tensorio.read_bundle(args.train),
        id_val=tensorio.read_bundle(args.val),
        ood_val=tensorio.read_bundle(args.ood_val) if args.ood_val else None,
        model=model,
        label_source=args.label_source)
    state = det.fit_detector(args.detector, ctx, _parse_overrides(args.set))
    det.save_state(state, args.out)
    print(f"fitted {args.detector}: {state.hyper_summary()}")
    return 0


def _cmd_score(args) -> int:
    state = det.load_state(args.state)
    bundle = tensorio.read_bundle(args.bundle)
    model = mlp.load_model(args.model) if args.model else None
    scores = det.score_bundle(state, bundle, model)
    lines = ["index,score"] + [f"{i},{format(s, '.12g')}" for i, s in enumerate(scores)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(scores)} scores to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_evaluate(args) -> int:
    state = det.load_state(args.state)
    id_bundle = tensorio.read_bundle(args.id)
    ood_bundle = tensorio.read_bundle(args.ood)
    model = mlp.load_model(args.model) if args.model else None
    id_scores = det.score_bundle(state, id_bundle, model)
    ood_scores = det.score_bundle(state, ood_bundle, model)
    correct = id_bundle.logits.argmax(axis=1) == id_bundle.labels
    triple = metrics.auroc_triple(id_scores, correct, ood_scores)
    print(json.dumps(triple.to_json(), indent=2, sort_keys=True))
    return 0


def _load_matrix_config(path_or_default: str) -> harness.RunMatrixConfig:
    if path_or_default == "default":
        return harness.default_matrix_config()
    return harness.RunMatrixConfig.from_dict(
        json.loads(Path(path_or_default).read_text()))


def _cmd_benchmark(args) -> int:
    config = _load_matrix_config(args.config)
    if args.seed is not None:
        config.seeds = [args.seed]
    report = harness.run_matrix(config, args.out, workers=args.workers,
                                resume=args.resume)
    meta = harness.emit_reports(report, args.out, figures=not args.no_figures)
    print(f"rows: {meta['n_rows']}, failures: {meta['n_failures']}, "
          f"completeness: {meta['completeness']['ok']}")
    return 3 if report.failures else 0


def _cmd_report(args) -> int:
    report = harness.load_report(args.run)
    meta = harness.emit_reports(report, args.out or args.run,
                                figures=not args.no_figures)
    print(f"re-emitted reports for {meta['n_rows']} rows")
    return 3 if report.failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodnoise",
        description="OOD detection benchmarking under label noise")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic split set")
    p.add_argument("--spec", default="default",
                   help="mixture spec JSON file, or 'default'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("inject-noise", help="add a noisy label tensor to a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", choices=[noise.MODEL_SU, noise.MODEL_SCC,
                                       noise.MODEL_REAL], required=True)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--tag", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transition", help="JSON file with a row-stochastic matrix")
    p.add_argument("--labels-json", help="JSON file with external noisy labels")
    p.set_defaults(func=_cmd_inject_noise)

    p = sub.add_parser("train", help="train an MLP checkpoint pair on a split set")
    p.add_argument("--data", required=True, help="split-set directory")
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", default="32,16")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noisy-key", help="train label tensor key (default clean labels)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("extract", help="export a forward-trace bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-layers", action="store_true")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("fit", help="fit one detector")
    p.add_argument("--detector", required=True, choices=sorted(det.DETECTORS))
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--ood-val")
    p.add_argument("--model")
    p.add_argument("--label-source", default="train", choices=["train", "val"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="hyperparameter override (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("score", help="score a bundle with a fitted detector")
    p.add_argument("--state", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--model")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("evaluate", help="AUROC triple for one ID/OOD bundle pair")
    p.add_argument("--state", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--model")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("benchmark", help="run a full experiment matrix")
    p.add_argument("--config", required=True, help="matrix JSON, or 'default'")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                   help="skip completed model trainings and detector cells")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--seed", type=int, default=None,
                   help="narrow the seed axis to a single seed")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("report", help="re-emit tables and figures for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
