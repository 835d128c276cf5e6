"""Command-line pipeline: generate -> render -> train -> eval, plus predict, gradcheck, run-all.

Progress goes to stderr, one line per epoch; machine-readable outputs go to files.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import RunConfig, parse_snr, snr_heading, snr_tag
from .imaging import build_image_dataset, read_manifest
from .model import build_model
from .nn.checkpoint import load_model, save_model
from .signals import CLASS_NAMES, MANIFEST_NAME, generate_dataset, read_waveforms, write_waveforms
from .training import (Metrics, evaluate, load_images, predict, stderr_progress,
                       stratified_split, train, write_history_csv)

CHECKPOINT_STEM = "model"


class UsageError(ValueError):
    pass


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def load_config(args) -> RunConfig:
    """Config file (or defaults) with command-line flags layered on top."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "per_class", None) is not None:
        over["per_class"] = args.per_class
    if getattr(args, "classes", None):
        over["classes"] = [c.strip() for c in args.classes.split(",") if c.strip()]
    if getattr(args, "snr", None):
        over["snr_db"] = [parse_snr(s) for s in args.snr]
    if getattr(args, "px", None) is not None:
        over["px"] = args.px
    if getattr(args, "out", None) is not None:
        over["out_dir"] = str(args.out)
    if getattr(args, "epochs", None) is not None:
        over["train"] = replace(cfg.train, epochs=args.epochs)
    return replace(cfg, **over).validate()


def checkpoint_path(path) -> Path:
    p = Path(path)
    return p / CHECKPOINT_STEM if p.is_dir() else p


# --- stages -----------------------------------------------------------------

def stage_generate(cfg: RunConfig, snr, out_dir) -> dict:
    items = generate_dataset(cfg.class_list(), cfg.per_class, snr, cfg.timebase(), cfg.seed)
    write_waveforms(items, out_dir)
    return dict(sorted(Counter(i.waveform.label.name for i in items).items(),
                       key=lambda kv: CLASS_NAMES.index(kv[0])))


def stage_render(wave_dir, image_dir, px: int, workers=None) -> list:
    if not (Path(wave_dir) / MANIFEST_NAME).exists():
        raise FileNotFoundError(f"no waveform manifest ({MANIFEST_NAME}) in {wave_dir}")
    return build_image_dataset(read_waveforms(wave_dir), image_dir, px, workers)


def split_entries(image_dir, ratio: float, seed: int):
    return stratified_split(read_manifest(image_dir), ratio, seed)


def stage_train(cfg: RunConfig, image_dir, out_dir) -> List[dict]:
    tcfg = cfg.train_config()
    train_entries, test_entries = split_entries(image_dir, tcfg.split_ratio, tcfg.seed)
    train_set = load_images(train_entries, image_dir, cfg.px)
    test_set = load_images(test_entries, image_dir, cfg.px)
    model = build_model(cfg.model, seed=cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = train(model, train_set, tcfg, test_set, progress=stderr_progress)
    save_model(model, out_dir / CHECKPOINT_STEM,
               extra={"epochs": tcfg.epochs, "seed": tcfg.seed, "split_ratio": tcfg.split_ratio})
    write_history_csv(history, out_dir / "history.csv")
    (out_dir / "split.json").write_text(json.dumps(
        {"train": [e["image_path"] for e in train_entries],
         "test": [e["image_path"] for e in test_entries]}, indent=1) + "\n")
    return history


def stage_eval(ckpt, image_dir, out_dir, use_all: bool = False) -> Metrics:
    model, index = load_model(checkpoint_path(ckpt))
    if use_all:
        entries = read_manifest(image_dir)
    else:
        extra = index.get("extra") or {}
        if "seed" not in extra or "split_ratio" not in extra:
            raise ValueError("checkpoint lacks split information; pass --all")
        _, entries = split_entries(image_dir, extra["split_ratio"], extra["seed"])
    X, y = load_images(entries, image_dir, model.config.input_px)
    metrics = evaluate(model, (X, y))
    check_metrics(metrics, y)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write(out_dir / "metrics.json", out_dir / "confusion.csv")
    return metrics


def check_metrics(m: Metrics, y_true) -> None:
    """Row sums equal per-class test counts; overall accuracy equals trace / total."""
    cm = np.array(m.confusion)
    counts = np.bincount(np.asarray(y_true), minlength=cm.shape[0])
    if not np.array_equal(cm.sum(axis=1), counts):
        raise AssertionError("confusion-matrix row sums differ from per-class test counts")
    if m.overall_accuracy != float(np.trace(cm) / cm.sum()):
        raise AssertionError("overall accuracy differs from trace / total")


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.1f}%"


def format_table(columns: Sequence[tuple]) -> str:
    """Per-class accuracy rows and an Overall row; one column per (heading, Metrics)."""
    head = f"{'Classes':8s}" + "".join(f"{h:>10s}" for h, _ in columns)
    lines = [head]
    names = columns[0][1].class_names
    for i, name in enumerate(names):
        cells = [m.per_class_accuracy[i] for _, m in columns]
        if all(c is None for c in cells):
            continue
        lines.append(f"{name:8s}" + "".join(f"{_pct(c):>10s}" for c in cells))
    lines.append(f"{'Overall':8s}" + "".join(f"{_pct(m.overall_accuracy):>10s}"
                                              for _, m in columns))
    return "\n".join(lines)


def write_table_csv(columns: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [h for h, _ in columns])
        for i, name in enumerate(columns[0][1].class_names):
            w.writerow([name] + ["" if m.per_class_accuracy[i] is None
                                 else repr(m.per_class_accuracy[i]) for _, m in columns])
        w.writerow(["Overall"] + [repr(m.overall_accuracy) for _, m in columns])


def table_order(snrs):
    """Noisiest first, noiseless last."""
    return sorted(snrs, key=lambda s: (s is None, s if s is not None else 0.0))


# --- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args)
    if not args.snr:
        cfg.snr_db = [None]
    if len(cfg.snr_db) != 1:
        raise UsageError("generate writes one noise level; pass --snr at most once")
    out = Path(cfg.out_dir)
    counts = stage_generate(cfg, cfg.snr_db[0], out)
    print(f"wrote {sum(counts.values())} waveforms to {out} ({snr_heading(cfg.snr_db[0])})")
    for label, n in counts.items():
        print(f"  {label:4s} {n}")
    return 0


def cmd_render(args) -> int:
    cfg = load_config(args)
    entries = stage_render(args.waveforms, cfg.out_dir, cfg.px, cfg.workers)
    print(f"rendered {len(entries)} images ({cfg.px}x{cfg.px}) to {cfg.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    history = stage_train(cfg, args.images, cfg.out_dir)
    last = history[-1] if history else None
    print(f"checkpoint: {checkpoint_path(cfg.out_dir)}.json/.bin")
    if last:
        print(f"final epoch {last['epoch']}: loss {last['train_loss']:.4f}, "
              f"train acc {last['train_acc']:.4f}, test acc {last['test_acc']:.4f}")
    return 0


def cmd_eval(args) -> int:
    out = args.out
    if out is None:
        out = Path(args.checkpoint)
        out = out if out.is_dir() else out.parent
    metrics = stage_eval(args.checkpoint, args.images, out, use_all=args.all)
    print(format_table([("Accuracy", metrics)]))
    print(f"metrics: {Path(out) / 'metrics.json'}, confusion: {Path(out) / 'confusion.csv'}")
    return 0


def cmd_predict(args) -> int:
    model, _ = load_model(checkpoint_path(args.checkpoint))
    label, probs = predict(model, args.image)
    print(f"{label} {probs.max():.4f}")
    for name, p in zip(CLASS_NAMES, probs):
        print(f"  {name:4s} {p:.4f}")
    if args.out is not None:
        Path(args.out).write_text(json.dumps(
            {"label": label, "confidence": dict(zip(CLASS_NAMES, map(float, probs)))},
            indent=1) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_report, timed_battery

    reports, elapsed = timed_battery(seed=args.seed or 0, tolerance=args.tolerance,
                                     instances=args.instances)
    print(format_report(reports, elapsed))
    return 0 if all(r.passed for r in reports) else 1


def run_all(cfg: RunConfig) -> dict:
    """Generate, render, train and evaluate at every configured noise level."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "run_config.json")
    results = {}
    for snr in cfg.snr_db:
        tag = snr_tag(snr)
        base = out / tag
        t0 = time.perf_counter()
        log(f"[{tag}] generating waveforms")
        stage_generate(cfg, snr, base / "waveforms")
        log(f"[{tag}] rendering images")
        stage_render(base / "waveforms", base / "images", cfg.px, cfg.workers)
        log(f"[{tag}] training")
        stage_train(cfg, base / "images", base / "model")
        results[snr] = stage_eval(base / "model", base / "images", base)
        log(f"[{tag}] overall accuracy {results[snr].overall_accuracy:.4f} "
            f"({time.perf_counter() - t0:.0f} s)")
    columns = [(snr_heading(s), results[s]) for s in table_order(results)]
    write_table_csv(columns, out / "accuracy_table.csv")
    summary = {snr_tag(s): {"snr_db": s, "overall_accuracy": results[s].overall_accuracy}
               for s in table_order(results)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return results


def cmd_run_all(args) -> int:
    cfg = load_config(args)
    results = run_all(cfg)
    print(format_table([(snr_heading(s), results[s]) for s in table_order(results)]))
    return 0


# --- parser -----------------------------------------------------------------

def _common(p, out_required=False):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqdnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize labeled waveforms")
    _common(p, out_required=True)
    p.add_argument("--classes", help="comma-separated labels, e.g. V1,V5,V18")
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--snr", action="append", help="SNR in dB, or 'inf' for noiseless")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="render waveforms to spectrogram PNGs")
    p.add_argument("waveforms", type=Path, help="directory written by 'generate'")
    _common(p, out_required=True)
    p.add_argument("--px", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train the classifier on an image directory")
    p.add_argument("images", type=Path)
    _common(p, out_required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--px", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its held-out split")
    p.add_argument("checkpoint", type=Path, help="checkpoint directory or .json index")
    p.add_argument("images", type=Path)
    p.add_argument("--out", type=Path, help="where metrics go (default: checkpoint dir)")
    p.add_argument("--all", action="store_true", help="evaluate every image, not the test split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one PNG")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("image", type=Path)
    p.add_argument("--out", type=Path, help="also write the prediction as JSON")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run-all", help="generate, render, train and eval at each SNR")
    _common(p)
    p.add_argument("--classes")
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--snr", action="append")
    p.add_argument("--px", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        log(f"error: {exc}")
        return 2
    except (OSError, FloatingPointError, AssertionError) as exc:
        log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
