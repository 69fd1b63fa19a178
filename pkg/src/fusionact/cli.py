"""``fusionact`` command line: train, eval, infer, inspect.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 checkpoint
error (corrupt, incompatible, or mismatched with the dataset). Failures
print one line ``fusionact: error[<kind>]: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .config import ConfigError, load_config
from .data import (
    DATASETS,
    ChannelStats,
    DataError,
    Dataset,
    load_motionsense,
    load_ucihar,
    motionsense_dataset,
    normalize,
    partition_superclass,
    compute_stats,
    subject_split,
)
from .metrics import MetricsReport
from .model import forward, pathway_logits
from .tensor import ShapeError, softmax
from .train import IncompatibleCheckpoint, _predict_probs, evaluate, train_stage1, train_stage2

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4


class CliFailure(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _fail(code: int, kind: str, message: str) -> int:
    flat = " ".join(str(message).split())
    print(f"fusionact: error[{kind}]: {flat}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        usage = " ".join(self.format_usage().split())
        raise CliFailure(EXIT_USAGE, "usage", f"{message} ({usage})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusionact", description="FusionActNet activity recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True, help="flat key = value run config")
    p.add_argument("--stage", choices=["1-static", "1-dynamic", "2"], help="overrides the config stage")
    p.add_argument("--static-ck", help="static expert checkpoint (stage 2)")
    p.add_argument("--dynamic-ck", help="dynamic expert checkpoint (stage 2)")
    p.add_argument("--out", help="checkpoint path (overrides config 'out')")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--ck", required=True)
    p.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    p.add_argument("--root", required=True)
    p.add_argument("--confusion-out", help="write the confusion matrix as CSV")

    p = sub.add_parser("infer", help="classify one window")
    p.add_argument("--ck", required=True)
    p.add_argument("--input", required=True, help="CSV of channels x window_len floats")

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("--ck", required=True)
    return parser


# ---------------------------------------------------------------------------
# data access


def _load_split(dataset: str, root: str, split: str, seed: int, train_subjects: int) -> Dataset:
    """Train+validation ('train') or held-out test ('test') windows."""
    if dataset == "ucihar":
        return load_ucihar(root, split)
    full = motionsense_dataset(load_motionsense(root))
    trainval, test = subject_split(full, train_subjects, seed)
    return trainval if split == "train" else test


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliFailure(EXIT_CHECKPOINT, "checkpoint", str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    if args.stage:
        cfg.stage = args.stage
    if args.out:
        cfg.out = args.out
    if cfg.stage == "2" and not (args.static_ck and args.dynamic_ck):
        return _fail(
            EXIT_USAGE,
            "usage",
            "stage 2 requires --static-ck and --dynamic-ck "
            "(usage: fusionact train --config CFG --stage 2 --static-ck CK --dynamic-ck CK)",
        )
    tcfg = cfg.train_config()
    try:
        data = _load_split(cfg.dataset, cfg.root, "train", cfg.seed, cfg.train_subjects)
    except (DataError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))

    if cfg.stage == "2":
        static_ck = _load_model(args.static_ck)
        dynamic_ck = _load_model(args.dynamic_ck)
        try:
            result = train_stage2(data, static_ck, dynamic_ck, tcfg)
        except IncompatibleCheckpoint as exc:
            return _fail(EXIT_CHECKPOINT, "incompatible", str(exc))
    else:
        which = cfg.stage.split("-", 1)[1]
        stats = compute_stats(data)
        subset = partition_superclass(data)[0 if which == "static" else 1]
        try:
            result = train_stage1(subset, which, tcfg, stats)
        except ValueError as exc:
            return _fail(EXIT_DATA, "data", str(exc))

    model = result.model
    # the output path is not a training setting; keep it out so reruns are byte-identical
    model.run_config = {k: v for k, v in cfg.as_dict().items() if k != "out"}
    save_checkpoint(model, cfg.out)
    best = result.history[result.best_epoch]
    print(
        f"final stage={cfg.stage} best_epoch={result.best_epoch} val_loss={best.val_loss:.6f} "
        f"val_accuracy={best.val_accuracy:.6f} classes={','.join(_output_classes(model))} out={cfg.out}"
    )
    for note in result.notes:
        print(f"note: {note}")
    return EXIT_OK


def _output_classes(model) -> list[str]:
    if model.is_complete():
        return model.class_order
    return model.static_labels if model.static is not None else model.dynamic_labels


def cmd_eval(args) -> int:
    model = _load_model(args.ck)
    if model.dataset != args.dataset:
        return _fail(
            EXIT_CHECKPOINT, "mismatch", f"checkpoint was trained on {model.dataset}, not {args.dataset}"
        )
    rc = model.run_config or {}
    try:
        test = _load_split(args.dataset, args.root, "test", int(rc.get("seed", 42)), int(rc.get("train_subjects", 16)))
        if test.X.shape[1:] != (model.in_channels, model.window_len):
            return _fail(EXIT_CHECKPOINT, "mismatch", f"windows {test.X.shape[1:]} do not fit the model")
        if model.is_complete():
            report = evaluate(model, test)
        else:
            report = _evaluate_expert(model, test)
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    print(report.format())
    if args.confusion_out:
        Path(args.confusion_out).write_text(report.confusion_csv())
    return EXIT_OK


def _evaluate_expert(model, test: Dataset) -> MetricsReport:
    static, dynamic = partition_superclass(test)
    pathway = model.static if model.static is not None else model.dynamic
    subset = static if model.static is not None else dynamic
    labels = _output_classes(model)
    if len(subset) == 0:
        raise DataError("test split has no windows of this expert's superclass")
    subset = normalize(subset, ChannelStats(model.norm_mean, model.norm_std))
    probs = _predict_probs(lambda xb: softmax(pathway_logits(xb, pathway, "eval"), axis=1), subset.X, 256)
    return MetricsReport.from_predictions(probs.argmax(axis=1), subset.label_indices(labels), labels)


def cmd_infer(args) -> int:
    model = _load_model(args.ck)
    if not model.is_complete():
        return _fail(EXIT_CHECKPOINT, "checkpoint", "inference needs a full (stage 2) checkpoint")
    try:
        window = np.loadtxt(args.input, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_DATA, "input", f"cannot read window {args.input}: {exc}")
    if window.shape != (model.in_channels, model.window_len):
        return _fail(
            EXIT_DATA,
            "input",
            f"window shape {window.shape} != expected ({model.in_channels}, {model.window_len})",
        )
    if not np.all(np.isfinite(window)):
        return _fail(EXIT_DATA, "input", "window contains non-finite values")
    x = window[None]
    if model.norm_mean is not None:
        x = (x - model.norm_mean[None, :, None]) / model.norm_std[None, :, None]
    try:
        pred = forward(x, model, "eval")
    except ShapeError as exc:
        return _fail(EXIT_DATA, "input", str(exc))
    probs = pred.probs.data[0]
    label = model.class_order[int(probs.argmax())]
    print(f"label {label}")
    print(f"gate {pred.gate.data[0, 0]:.9f}")
    print("probs " + ",".join(f"{c}={p:.9f}" for c, p in zip(model.class_order, probs)))
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        manifest = read_manifest(args.ck)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "inspect": cmd_inspect}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except CliFailure as exc:
        return _fail(exc.code, exc.kind, str(exc))


if __name__ == "__main__":
    sys.exit(main())
