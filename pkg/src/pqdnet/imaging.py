"""Spectrogram rendering: min-max scaling, jet colormap, bilinear resize, PNG dataset."""
from __future__ import annotations

import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .signals import CLASS_NAMES
from .stransform import amplitude, forward_st, resample_pow2

DESK_PX = 64
PAPER_PX = 240
IMAGE_MANIFEST = "images.jsonl"


def normalize_minmax(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def jet_colormap(v):
    """Piecewise-linear jet. Returns channels in [0, 1] with a trailing axis of 3."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def to_bytes(rgb) -> np.ndarray:
    return np.round(255.0 * np.asarray(rgb)).astype(np.uint8)


def _axis_coords(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (H, W) or (H, W, C) array.

    uint8 input gives rounded uint8 output; anything else comes back as float64.
    """
    img = np.asarray(img)
    if out_h <= 0 or out_w <= 0 or img.shape[0] <= 0 or img.shape[1] <= 0:
        raise ValueError("image dimensions must be positive")
    if img.shape[:2] == (out_h, out_w):
        return img.copy()
    is_bytes = img.dtype == np.uint8
    a = img.astype(np.float64)
    y0, y1, fy = _axis_coords(a.shape[0], out_h)
    x0, x1, fx = _axis_coords(a.shape[1], out_w)
    extra = (None,) * (a.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    if is_bytes:
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out


def render_spectrogram(amp, out_px: int = DESK_PX) -> np.ndarray:
    """(out_px, out_px, 3) uint8 jet image of an amplitude matrix, high frequencies on top."""
    v = resize_bilinear(normalize_minmax(amp), out_px, out_px)
    return to_bytes(jet_colormap(v[::-1]))


def waveform_image(samples, sample_rate: float, out_px: int = DESK_PX) -> np.ndarray:
    x, rate = resample_pow2(samples, sample_rate)
    return render_spectrogram(amplitude(forward_st(x, rate)), out_px)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _render_task(args):
    samples, fs, px, path = args
    save_png(waveform_image(samples, fs, px), path)
    return path


def worker_count(default: Optional[int] = None) -> int:
    cap = os.environ.get("PQD_THREADS")
    n = default if default is not None else (os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def build_image_dataset(waveforms: Sequence, out_dir, out_px: int = DESK_PX,
                        workers: Optional[int] = None) -> list:
    """Render each labeled waveform to ``out_dir/<label>/<label>_<index>.png``.

    Returns the manifest entries (also written to ``out_dir/images.jsonl``).
    Files created by a failed run are removed before the error propagates.
    """
    out_dir = Path(out_dir)
    entries, tasks = [], []
    for item in waveforms:
        w = item.waveform
        label = w.label.name
        rel = f"{label}/{label}_{item.index}.png"
        entries.append({"image_path": rel, "class_label": label,
                        "snr_db": w.snr_db, "source_waveform_id": item.id})
        tasks.append((w.samples, w.timebase.sample_rate, out_px, out_dir / rel))
    if len({e["image_path"] for e in entries}) != len(entries):
        raise ValueError("duplicate image paths in input")
    if not entries:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    created_dirs = []
    for label in sorted({e["class_label"] for e in entries}):
        d = out_dir / label
        if not d.exists():
            d.mkdir()
            created_dirs.append(d)
    written = []
    try:
        n = worker_count(workers)
        if n == 1:
            for t in tasks:
                written.append(_render_task(t))
        else:
            with ProcessPoolExecutor(max_workers=n) as pool:
                for path in pool.map(_render_task, tasks, chunksize=16):
                    written.append(path)
        write_manifest(entries, out_dir)
    except BaseException:
        for t in tasks:
            Path(t[3]).unlink(missing_ok=True)
        for d in created_dirs:
            shutil.rmtree(d, ignore_errors=True)
        raise
    return entries


def write_manifest(entries, out_dir) -> Path:
    path = Path(out_dir) / IMAGE_MANIFEST
    path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))
    return path


def read_manifest(image_dir) -> list:
    path = Path(image_dir) / IMAGE_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no image manifest at {path}")
    entries = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    for e in entries:
        if e["class_label"] not in CLASS_NAMES:
            raise ValueError(f"unknown class label {e['class_label']!r} in {path}")
    return entries
