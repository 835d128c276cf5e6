#!/usr/bin/env python3
"""Desk-scale noise-robustness experiment: 18 classes x 100 waveforms, 64 px images,
one classifier per noise level (noiseless, 40, 30, 20 dB).

    python3 scripts/run_desk.py --out runs/desk [--config configs/desk.json] [--seed 0]

Writes per-level waveforms, images, checkpoints, metrics and an accuracy table
(accuracy_table.csv, summary.json) under --out and prints the table.
"""
import argparse
import sys
import time
from pathlib import Path

from pqdnet.cli import format_table, run_all, table_order
from pqdnet.config import RunConfig, snr_heading

HERE = Path(__file__).resolve().parent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE.parent / "configs" / "desk.json")
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args(argv)

    cfg = RunConfig.load(args.config)
    cfg.out_dir = str(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    t0 = time.perf_counter()
    results = run_all(cfg)
    print(format_table([(snr_heading(s), results[s]) for s in table_order(results)]))
    print(f"total time {(time.perf_counter() - t0) / 60:.1f} min", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
