"""Command-line entry points.

Commands: train, eval, gradcheck, ablate, synth.  Exit codes: 0 success,
2 configuration/input error, 3 numerical failure, 4 assertion failure in a
check command (for CI).  Metrics are line-delimited JSON; everything else a
command prints to stdout is a single JSON document, so output is scriptable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import data as data_mod
from . import linalg, runs, training
from .config import RunConfig, load_config
from .exceptions import (
    ConfigError,
    EmptyBatchError,
    GrassfuseError,
    NumericalError,
    ParseError,
)
from .layers import model_forward

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK_FAILED = 4

# Finite differencing walks every parameter twice per loss evaluation; above
# this many parameters the audit stops being a desk-scale tool.
GRADCHECK_PARAM_LIMIT = 5000


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(document: dict) -> None:
    json.dump(document, sys.stdout, indent=1)
    sys.stdout.write("\n")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    metrics_path = out / "metrics.jsonl"
    checkpoint_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    with open(metrics_path, "w") as metrics:

        def on_epoch(record: dict) -> None:
            metrics.write(json.dumps(record) + "\n")
            metrics.flush()

        art = runs.train_once(cfg, variant=args.variant, on_epoch=on_epoch)
        train_acc, _ = training.evaluate(art.model, art.train.features, art.train.labels)
        if art.test is not None and len(art.test) > 0:
            test_acc, _ = training.evaluate(art.model, art.test.features, art.test.labels)
        else:
            test_acc = None
        summary = {
            "summary": True,
            "epochs_run": art.result.epochs_run,
            "converged": art.result.monitor.converged,
            "converged_at": art.result.monitor.converged_at,
            "train_accuracy": train_acc,
            "test_accuracy": test_acc,
            "parameters": art.model.parameter_count(),
            "checkpoint": str(checkpoint_path),
            "seed": cfg.seed,
            "variant": args.variant,
        }
        metrics.write(json.dumps(summary) + "\n")
    ckpt.save_checkpoint(
        checkpoint_path, art.model, cfg, epoch=art.result.epochs_run
    )
    _emit(summary)
    return EXIT_OK


def _eval_split(cfg: RunConfig, split: str):
    train_ds, test_ds = runs.prepare_datasets(cfg)
    if split == "train":
        return train_ds
    if test_ds is None or len(test_ds) == 0:
        raise EmptyBatchError("eval: no test split configured (use --split train?)")
    return test_ds


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load(args)
    model = runs.new_model(cfg)
    ckpt.restore_model(model, args.checkpoint)
    dataset = _eval_split(cfg, args.split)
    accuracy, confusion = training.evaluate(model, dataset.features, dataset.labels)
    document = {
        "split": args.split,
        "samples": len(dataset),
        "accuracy": round(accuracy, 4),
        "confusion": confusion.tolist(),
    }
    if args.out:
        out = _out_dir(args)
        with open(out / f"eval_{args.split}.json", "w") as handle:
            json.dump(document, handle, indent=1)
            handle.write("\n")
    _emit(document)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _load(args)
    model = runs.new_model(cfg)
    count = model.parameter_count()
    if count > GRADCHECK_PARAM_LIMIT:
        raise ConfigError(
            f"gradcheck: model has {count} parameters; finite differencing is only "
            f"practical up to {GRADCHECK_PARAM_LIMIT}. Use a smaller block "
            "(the audit is architecture-independent, a tiny config checks the same code paths)."
        )
    train_ds, _ = runs.prepare_datasets(cfg)
    batch = min(3, len(train_ds))
    report = training.gradcheck(
        model,
        train_ds.features[:batch],
        train_ds.labels[:batch],
        cfg.loss,
        tolerance=args.tolerance,
        fd_step=args.fd_step,
    )
    document = report.to_dict()
    if args.out:
        out = _out_dir(args)
        with open(out / "gradcheck.json", "w") as handle:
            json.dump(document, handle, indent=1)
            handle.write("\n")
    _emit(document)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if cfg.ablation is None:
        raise ConfigError("ablate: config needs an 'ablation' section (seeds list)")
    rows_sink = sys.stderr

    def on_run(row: dict) -> None:
        rows_sink.write(json.dumps(row) + "\n")
        rows_sink.flush()

    table = runs.ablation_study(cfg, on_run=on_run)
    out = _out_dir(args)
    table_path = out / "ablation.json"
    with open(table_path, "w") as handle:
        json.dump(table, handle, indent=1)
        handle.write("\n")
    _emit({"table": str(table_path), "summary": table["summary"], "ordering": table["ordering"]})
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if cfg.data.synthetic is None:
        raise ConfigError("synth: config has no data.synthetic section")
    out = _out_dir(args)
    train_ds, test_ds, _ = data_mod.make_synthetic(cfg.data.synthetic, cfg.seed)
    train_manifest = data_mod.export_manifest(train_ds, out, "train")
    test_manifest = data_mod.export_manifest(test_ds, out, "test")
    _emit(
        {
            "train_manifest": str(train_manifest),
            "test_manifest": str(test_manifest),
            "train": data_mod.summarize(train_ds, cfg.data.synthetic.classes),
            "test": data_mod.summarize(test_ds, cfg.data.synthetic.classes),
        }
    )
    return EXIT_OK


def cmd_smoke(args: argparse.Namespace) -> int:
    cfg = _load(args)
    model = runs.new_model(cfg)
    train_ds, _ = runs.prepare_datasets(cfg)
    import time

    start = time.perf_counter()
    out = model_forward(model, train_ds.features[:1], training=False, update_state=False)
    elapsed = time.perf_counter() - start
    logits = out.logits[0]
    _emit(
        {
            "logits": logits.tolist(),
            "finite": bool(logits.isfinite().all()),
            "aggregate_entries": int(out.blocks[-1].aggregate[0].numel()),
            "seconds": elapsed,
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grassfuse",
        description="Subspace-fusion classifier: train, evaluate, audit gradients, "
        "run ablations, export synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: cwd)")

    p_train = sub.add_parser("train", help="train a model, write checkpoint + metrics")
    common(p_train)
    p_train.add_argument("--checkpoint", default=None, help="checkpoint path (default: <out>/checkpoint.json)")
    p_train.add_argument(
        "--variant",
        choices=list(runs.VARIANTS),
        default="adaptive",
        help="importance-matrix treatment (ablation variants)",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=["train", "test"], default="test")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p_grad)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--fd-step", dest="fd_step", type=float, default=1e-5)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="adaptive/fixed/random study across seeds")
    common(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_synth = sub.add_parser("synth", help="export the synthetic dataset as CSV manifests")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_smoke = sub.add_parser("smoke", help="single-sample forward pass timing/shape check")
    common(p_smoke)
    p_smoke.set_defaults(func=cmd_smoke)

    return parser


def main(argv: list[str] | None = None) -> int:
    linalg.set_single_thread()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GrassfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
