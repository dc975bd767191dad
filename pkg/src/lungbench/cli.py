"""Command-line harness: generate, train, evaluate, compare, metrics-from-csv.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data, metrics
from .data import CLASSES, AugmentConfig, DISABLED, derive_seed
from .models import ModelFormatError, ModelSpec, build_model, build_proposed, load_model, save_model
from .train import TrainConfig, fit

METHODS = ("cnn_basic", "cnn_aug", "resnet_style", "vit", "proposed")
DISPLAY_NAMES = {
    "cnn_basic": "CNN basic",
    "cnn_aug": "CNN + Data Augmentation",
    "resnet_style": "ResNet-style",
    "vit": "ViT",
    "proposed": "Proposed method",
}
TABLE_METRICS = ("accuracy", "sensitivity", "specificity", "auc")
KIND_OF = {"cnn_basic": "BasicCnn", "cnn_aug": "BasicCnn", "resnet_style": "ResNetStyle", "vit": "ViT"}
# per-family learning rates; every other training default is shared
DEFAULT_LR = {"BasicCnn": 0.005, "ResNetStyle": 0.01, "ViT": 0.005}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------ method configs


def method_spec(method: str, side: int, seed: int) -> ModelSpec:
    kind = KIND_OF[method]
    # both CNN variants share an initialization so only augmentation differs
    return ModelSpec(kind, input_side=side, num_classes=len(CLASSES), seed=derive_seed(seed, "init", kind))


def method_train_config(method: str, args) -> TrainConfig:
    kind = KIND_OF[method]
    return TrainConfig(
        learning_rate=args.lr if args.lr is not None else DEFAULT_LR[kind],
        momentum=args.momentum,
        epochs=args.epochs,
        batch_size=args.batch_size,
        global_seed=args.seed,
        augment=DISABLED if method == "cnn_basic" else AugmentConfig(),
    )


def _load_splits(manifest_path, *splits) -> list:
    manifest = data.load_manifest(manifest_path)
    out = []
    for split in splits:
        samples = data.split_view(manifest, split)
        if not samples:
            raise DataError(f"manifest {manifest_path} has no {split!r} samples")
        out.append(samples)
    return out


def train_method(method: str, train, val, args, out_dir: Path) -> Path:
    """Train one single-network method; writes ``<method>.lbm`` and ``<method>.train.json``."""
    side = train[0].pixels.shape[-1]
    model = build_model(method_spec(method, side, args.seed))
    config = method_train_config(method, args)
    _log(f"[{method}] training {model.spec.kind} ({model.num_parameters()} parameters)")
    report = fit(model, train, val, config, log=lambda m: _log(f"[{method}] {m}"))
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / f"{method}.lbm"
    save_model(model, model_path)
    payload = {"method": method, "train_config": config.to_dict(), **report.to_dict()}
    (out_dir / f"{method}.train.json").write_text(json.dumps(payload, indent=2) + "\n")
    return model_path


def write_ensemble_manifest(out_dir: Path, resnet_path: Path, vit_path: Path) -> Path:
    path = out_dir / "proposed.json"
    payload = {
        "kind": "ProposedEnsemble",
        "members": {
            "resnet": os.path.relpath(resnet_path, out_dir),
            "vit": os.path.relpath(vit_path, out_dir),
        },
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_any_model(path):
    """Load an ``.lbm`` model, or an ensemble manifest that references two of them."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file {path} not found")
    if path.suffix == ".json":
        try:
            payload = json.loads(path.read_text())
            members = payload["members"]
            resnet = load_model(path.parent / members["resnet"])
            vit = load_model(path.parent / members["vit"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed ensemble manifest ({exc})") from None
        return build_proposed(ModelSpec("ProposedEnsemble", num_classes=resnet.spec.num_classes), resnet, vit)
    return load_model(path)


def oracle_probs(samples) -> np.ndarray:
    """Scores of a stub model that always puts all mass on the true class."""
    return np.eye(len(CLASSES))[[s.label_index for s in samples]]


def evaluate_to_dir(probs, samples, out_dir: Path) -> metrics.MetricsReport:
    true_idx = [s.label_index for s in samples]
    report = metrics.report_from_scores(true_idx, probs)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_predictions(out_dir / "predictions.csv", samples, probs)
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.txt").write_text(report.to_text())
    return report


# ------------------------------------------------------------ comparison table


def format_row(method: str, disease: str, values, widths=None) -> str:
    """``CNN basic  Cancer  0.85  0.80  0.90  0.88``; optional widths pad the name columns."""
    mw, dw = widths or (0, 0)
    cells = [f"{method:<{mw}}", f"{disease:<{dw}}"] + [f"{v:.2f}" for v in values]
    return "  ".join(cells)


def comparison_rows(reports: dict) -> list:
    rows = []
    for method in METHODS:
        if method not in reports:
            continue
        report = reports[method]
        for disease in CLASSES:
            m = report.per_class[disease]
            rows.append({"method": method, "disease": disease, **{k: getattr(m, k) for k in TABLE_METRICS}})
        rows.append({"method": method, "disease": "Media", **{k: getattr(report.mean, k) for k in TABLE_METRICS}})
    return rows


def comparison_text(rows) -> str:
    mw = max([len("Method")] + [len(DISPLAY_NAMES[r["method"]]) for r in rows])
    dw = max(len(d) for d in ("Disease", "Media") + CLASSES)
    head = "  ".join(
        [f"{'Method':<{mw}}", f"{'Disease':<{dw}}", "Accuracy", "Sensitivity", "Specificity", "AUC"]
    )
    lines = [head, "-" * len(head)]
    for r in rows:
        vals = [r[k] for k in TABLE_METRICS]
        lines.append(format_row(DISPLAY_NAMES[r["method"]], r["disease"], vals, (mw, dw)))
    return "\n".join(lines) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- subcommands


def parse_per_class(text: str) -> dict:
    try:
        counts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--per-class expects three integers like 20,4,6, got {text!r}") from None
    if len(counts) != 3 or min(counts) < 0:
        raise UsageError(f"--per-class expects three non-negative integers, got {text!r}")
    return {c: counts for c in CLASSES}


def cmd_generate(args) -> int:
    if args.paper_scale:
        counts = dict(data.PAPER_SCALE)
        side = args.side or 256
    else:
        counts = parse_per_class(args.per_class) if args.per_class else dict(data.DESK_SCALE)
        side = args.side or 32
    if side < 16:
        raise UsageError(f"--side must be >= 16, got {side}")
    manifest = data.generate_synthetic(counts, side, args.seed, args.out)
    totals = manifest.split_totals()
    print(f"wrote {len(manifest)} images ({side}x{side}) to {args.out}")
    print("  ".join(f"{s}={totals[s]}" for s in data.SPLITS))
    counts_by = manifest.counts()
    for label in CLASSES:
        print(f"  {label:<13}" + "".join(f"{counts_by[(label, s)]:>8}" for s in data.SPLITS))
    return EXIT_OK


def cmd_train(args) -> int:
    train, val = _load_splits(args.manifest, "train", "validation")
    out = Path(args.out)
    if args.method == "proposed":
        resnet = train_method("resnet_style", train, val, args, out)
        vit = train_method("vit", train, val, args, out)
        print(write_ensemble_manifest(out, resnet, vit))
    else:
        print(train_method(args.method, train, val, args, out))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    (samples,) = _load_splits(args.manifest, args.split)
    if args.oracle_model:
        probs = oracle_probs(samples)
    elif args.model:
        probs = metrics.predict_proba(load_any_model(args.model), samples)
    else:
        raise UsageError("evaluate needs --model or --oracle-model")
    report = evaluate_to_dir(probs, samples, Path(args.out))
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    train, val, test = _load_splits(args.manifest, "train", "validation", "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    side = train[0].pixels.shape[-1]
    config = {
        "seed": args.seed,
        "side": side,
        "methods": {
            m: {"model": method_spec(m, side, args.seed).to_dict(), "train": method_train_config(m, args).to_dict()}
            for m in METHODS
            if m != "proposed"
        },
    }
    reports = {}
    model_paths = {}

    def run(method):
        t0 = time.perf_counter()
        path = train_method(method, train, val, args, out / method)
        probs = metrics.predict_proba(load_any_model(path), test)
        report = evaluate_to_dir(probs, test, out / method)
        _log(f"[{method}] done in {time.perf_counter() - t0:.1f}s, mean accuracy {report.mean.accuracy:.4f}")
        return method, path, report

    threads = max(1, int(os.environ.get("LUNGBENCH_THREADS", "1")))
    trainable = [m for m in METHODS if m != "proposed"]
    if threads == 1:
        results = [run(m) for m in trainable]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, trainable))
    for method, path, report in results:
        model_paths[method] = path
        reports[method] = report

    ens_dir = out / "proposed"
    ens_dir.mkdir(parents=True, exist_ok=True)
    ens_path = write_ensemble_manifest(ens_dir, model_paths["resnet_style"], model_paths["vit"])
    probs = metrics.predict_proba(load_any_model(ens_path), test)
    reports["proposed"] = evaluate_to_dir(probs, test, ens_dir)

    rows = comparison_rows(reports)
    payload = {
        "methods": list(METHODS),
        "method_names": DISPLAY_NAMES,
        "classes": list(CLASSES),
        "metrics": list(TABLE_METRICS),
        "rows": rows,
        "provenance": {
            "seed": args.seed,
            "config_hash": config_hash(config),
            "timestamps": {"started": started, "finished": datetime.now(timezone.utc).isoformat()},
        },
    }
    (out / "comparison.json").write_text(json.dumps(payload, indent=2) + "\n")
    text = comparison_text(rows)
    (out / "comparison.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_metrics_from_csv(args) -> int:
    report = metrics.metrics_from_csv(args.predictions)
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_train_flags(p) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: per model family)")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lungbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    p.add_argument("--out", default="data")
    p.add_argument("--per-class", help="train,validation,test images per class (default 50,10,15)")
    p.add_argument("--side", type=int, help="image side in pixels (default 32, or 256 with --paper-scale)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--paper-scale", action="store_true", help="2000/400/600 images per class")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method")
    p.add_argument("--method", required=True, choices=METHODS)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a model on one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", help="model file (.lbm) or ensemble manifest (.json)")
    p.add_argument("--oracle-model", action="store_true", help="stub model that predicts the true label")
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train and evaluate all five methods")
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metrics-from-csv", help="metrics report from a predictions CSV")
    p.add_argument("predictions")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_metrics_from_csv)
    return parser


DATA_ERRORS = (
    DataError,
    data.ManifestError,
    data.PGMError,
    metrics.PredictionsError,
    ModelFormatError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lungbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"lungbench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"lungbench: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
