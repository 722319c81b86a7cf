"""Command-line entry point: ``munet {synth,train,eval,predict}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import io as mio
from .data import MissingClassError, SYNTH_CLASSES, class_counts, generate_synthetic, materialize
from .inference import predict_mosaic
from .metrics import format_kv, format_table, per_class_metrics
from .train import ConfigMismatchError, TrainConfig, evaluate, load_checkpoint, train
from .types import UNLABELED, ClassTable, InvalidLabelError

log = logging.getLogger("munet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def run_root(out: str | None, default: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get("MUNET_RUN_DIR")
    return Path(root) / default if root else Path("runs") / default


def write_echo(run_dir: Path, lines: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k}={v}\n" for k, v in lines.items())
    (run_dir / "config.echo").write_text(text)


def _flags_to_overrides(args) -> dict:
    beta = None
    if args.beta is not None:
        try:
            beta = tuple(float(b) for b in args.beta.split(","))
        except ValueError as exc:
            raise ConfigError(f"--beta: {exc}") from exc
    return {
        "seed": args.seed,
        "m_levels": args.m_levels,
        "base_channels": args.base_channels,
        "beta": beta,
        "epsilon": args.epsilon,
        "window": args.window,
        "overlap": args.overlap,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch": args.batch,
        "patches_per_epoch": getattr(args, "patches_per_epoch", None),
    }


def resolve_train_config(args) -> TrainConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    try:
        return TrainConfig.from_text(text, **_flags_to_overrides(args))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _class_table(path: str | None) -> ClassTable:
    return mio.read_class_table(path) if path else SYNTH_CLASSES


def _load_pairs(manifest: str, K: int):
    try:
        return mio.load_dataset(manifest, K)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load dataset {manifest}: {exc}") from exc


# commands --------------------------------------------------------------------


def distribution_summary(pairs, names) -> str:
    K = len(names)
    lines = ["per-image class distribution (% of labeled pixels, unlabeled % of all pixels):"]
    head = "image  " + "  ".join(f"{n[:10]:>10}" for n in names) + f"  {'unlabeled':>10}"
    lines.append(head)
    total = np.zeros(K, dtype=np.int64)
    unlabeled = 0
    n_pixels = 0
    for i, (_, lab) in enumerate(pairs):
        c = class_counts([lab], K)
        u = int((lab.labels == UNLABELED).sum())
        total += c
        unlabeled += u
        n_pixels += lab.labels.size
        share = 100 * c / max(c.sum(), 1)
        lines.append(
            f"{i:5d}  " + "  ".join(f"{s:10.2f}" for s in share) + f"  {100 * u / lab.labels.size:10.2f}"
        )
    lines.append("")
    lines.append("marginal class distribution:")
    for name, c in zip(names, total):
        lines.append(f"  {name:<12} {int(c):>12d}  {100 * c / max(total.sum(), 1):6.2f}%")
    lines.append(f"  {'unlabeled':<12} {unlabeled:>12d}  {100 * unlabeled / max(n_pixels, 1):6.2f}% of all pixels")
    return "\n".join(lines) + "\n"


def cmd_synth(args) -> int:
    if not 0 < args.labeled_fraction <= 1:
        raise ConfigError("--labeled-fraction must be in (0, 1]")
    if args.size < 64:
        raise ConfigError("--size must be >= 64")
    out = run_root(args.out, "synth")
    echo = {
        "command": "synth",
        "seed": args.seed,
        "count": args.count,
        "size": args.size,
        "labeled_fraction": args.labeled_fraction,
        "out": out,
    }
    try:
        write_echo(out, echo)
        pairs = generate_synthetic(args.seed, args.count, args.size, args.labeled_fraction)
        materialize(pairs, out)
        mio.write_class_table(out / "classes.txt", SYNTH_CLASSES)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    summary = distribution_summary(pairs, SYNTH_CLASSES.names)
    (out / "distribution.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    out = run_root(args.out, "train")
    write_echo(out, {"command": "train", "manifest": args.manifest, "classes": args.classes or ""})
    with open(out / "config.echo", "a") as fh:
        fh.write(cfg.to_text())
    table = _class_table(args.classes)
    if table.K != cfg.num_classes:
        raise ConfigError(f"class table has {table.K} classes, config says {cfg.num_classes}")
    pairs = _load_pairs(args.manifest, cfg.num_classes)
    print(f"beta={','.join(repr(b) for b in cfg.beta)}")
    try:
        train(pairs, cfg, out, on_epoch=lambda r: print(r.line(), flush=True))
    except MissingClassError as exc:
        raise DataError(f"{exc}; regenerate the dataset or reduce the class table") from exc
    return EXIT_OK


class _IdentityStub:
    """Test-only: echoes the ground truth as the prediction."""


def _parse_stub(stub: str | None, K: int):
    if stub is None:
        return None
    if stub == "identity":
        return _IdentityStub()
    if stub.startswith("constant="):
        k = int(stub.split("=", 1)[1])
        p = np.full(K, 0.5 / (K - 1))
        p[k] = 0.5
        vec = torch.tensor(p, dtype=torch.float32)

        def fn(batch):
            n, _, h, w = batch.shape
            return vec[None, :, None, None].expand(n, K, h, w).clone()

        return fn
    raise ConfigError(f"unknown stub {stub!r}")


def _load_model(path: str):
    try:
        model, _ = load_checkpoint(path)
    except ConfigMismatchError as exc:
        raise ConfigError(str(exc)) from exc
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return model


def cmd_eval(args) -> int:
    table = _class_table(args.classes)
    K = table.K
    out = run_root(args.out, "eval")
    write_echo(
        out,
        {
            "command": "eval",
            "checkpoint": args.checkpoint or "",
            "manifest": args.manifest,
            "overlap": args.overlap,
            "stub": args.stub or "",
        },
    )
    stub = _parse_stub(args.stub, K)
    model = None if stub is not None else _load_model(args.checkpoint)
    if model is not None and model.config.K != K:
        raise ConfigError(f"checkpoint has K={model.config.K}, class table has {K}")
    pairs = _load_pairs(args.manifest, K)
    if isinstance(stub, _IdentityStub):
        from .metrics import confusion_matrix

        cm = np.zeros((K, K), dtype=np.int64)
        for _, lab in pairs:
            pred = np.where(lab.labels == UNLABELED, 0, lab.labels).astype(np.uint8)
            cm += confusion_matrix(pred, lab, K)
    else:
        cm = evaluate(model, pairs, K, overlap=args.overlap, window_fn=stub)
    report = per_class_metrics(cm)
    text = format_table(report, table.names)
    (out / "metrics.txt").write_text(text)
    (out / "metrics.kv").write_text(format_kv(report, table.names))
    print(text, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    table = _class_table(args.classes)
    out = run_root(args.out, "predict")
    write_echo(
        out,
        {
            "command": "predict",
            "checkpoint": args.checkpoint or "",
            "image": args.image,
            "overlap": args.overlap,
            "probabilities": args.probabilities,
            "stub": args.stub or "",
        },
    )
    try:
        mosaic = mio.read_mosaic(args.image)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from exc
    stub = _parse_stub(args.stub, table.K)
    if isinstance(stub, _IdentityStub):
        raise ConfigError("identity stub is only meaningful for eval")
    model = None if stub is not None else _load_model(args.checkpoint)
    prob, labels = predict_mosaic(model, mosaic, window=args.window, overlap=args.overlap, window_fn=stub)
    mio.write_labels(out / "overlay.png", labels, table)
    if args.probabilities:
        for k, name in enumerate(table.names):
            arr = np.round(prob.values[k] * 65535.0).astype(np.uint16)
            Image.fromarray(arr).save(out / f"prob_{k}_{name}.png")
    print(f"wrote {out / 'overlay.png'} ({labels.width}x{labels.height})")
    return EXIT_OK


# parser ------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="run directory (default: $MUNET_RUN_DIR/<command> or runs/<command>)")
    p.add_argument("--classes", help="class table manifest (default: the six synthetic classes)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--m-levels", type=int, dest="m_levels")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--beta", help="comma-separated level weights, finest first")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patches-per-epoch", type=int, dest="patches_per_epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="munet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--labeled-fraction", type=float, default=0.6, dest="labeled_fraction")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    _model_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--overlap", type=float, default=0.75)
    p.add_argument("--stub", help=argparse.SUPPRESS)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment a single mosaic")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--overlap", type=float, default=0.75)
    p.add_argument("--probabilities", action="store_true", help="also write per-class 16-bit maps")
    p.add_argument("--stub", help=argparse.SUPPRESS)
    _common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command in ("eval", "predict") and not args.checkpoint and not args.stub:
        print("error: --checkpoint is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidLabelError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
