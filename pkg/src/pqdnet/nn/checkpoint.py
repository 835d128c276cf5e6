"""Checkpoint files: ``<stem>.json`` index plus ``<stem>.bin`` float32 blob.

The index lists every tensor (parameters first, then BN running stats) by id
with its shape and element offset into the blob, and embeds the model config.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

FORMAT = "pqdnet-checkpoint/1"


def _paths(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save_state(state: dict, path, config: Optional[dict] = None, extra: Optional[dict] = None):
    index_path, blob_path = _paths(path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, value in state.items():
            arr = np.ascontiguousarray(value, dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"id": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    index = {"format": FORMAT, "dtype": "float32-le", "config": config, "tensors": entries}
    if extra:
        index["extra"] = extra
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return index_path, blob_path


def load_state(path) -> Tuple[dict, dict]:
    """Returns ``(state, index)``."""
    index_path, blob_path = _paths(path)
    index = json.loads(index_path.read_text())
    if index.get("format") != FORMAT:
        raise ValueError(f"{index_path}: unsupported checkpoint format {index.get('format')!r}")
    blob = np.fromfile(blob_path, dtype="<f4")
    state = {}
    for e in index["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        state[e["id"]] = blob[e["offset"]:e["offset"] + count].reshape(e["shape"]).copy()
    return state, index


def save_model(model, path, extra: Optional[dict] = None):
    return save_state(model.state_dict(), path, config=model.config.to_dict(), extra=extra)


def load_model(path):
    """Returns ``(model, index)``; the model is float32 and in training mode."""
    from ..model import GSResNet, ModelConfig

    state, index = load_state(path)
    model = GSResNet(ModelConfig.from_dict(index["config"]))
    model.load_state_dict(state)
    return model, index
