"""Optimization, data splitting, the training loop and evaluation metrics."""
from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .imaging import load_png, resize_bilinear
from .nn.layers import BatchNorm2d
from .nn.functional import softmax, softmax_cross_entropy
from .signals import CLASS_NAMES


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-7
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    split_ratio: float = 0.7
    precise_bn: bool = False  # recompute BN statistics over the training set after the last epoch

    def validate(self) -> "TrainConfig":
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if not 0 <= self.split_ratio <= 1:
            raise ValueError("split_ratio must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Single-cycle cosine annealing from lr_max (epoch 0) to lr_min (epoch == epochs)."""
    if cfg.epochs == 0:
        return cfg.lr_max
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    lr = cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))
    return min(max(lr, cfg.lr_min), cfg.lr_max)  # rounding can overshoot by an ulp


def nadam_update(theta, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Nadam step for step index ``t`` (1-based). Returns ``(theta, m, v)``.

    Weight decay is coupled: it is added to the gradient before the moments.
    """
    g = grad + weight_decay * theta
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = beta1 * m / (1 - beta1 ** (t + 1)) + (1 - beta1) * g / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Nadam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            p.value, self.m[i], self.v[i] = nadam_update(
                p.value, p.grad, self.m[i], self.v[i], self.t, lr,
                self.beta1, self.beta2, self.eps, self.weight_decay)
            p.value = p.value.astype(p.grad.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad.fill(0)


def stratified_split(entries: Sequence[dict], ratio: float = 0.7, seed: int = 0,
                     key: str = "class_label") -> Tuple[list, list]:
    """Per class, a seeded shuffle then floor(ratio * n) items to train, the rest to test.

    Output order is by class (first-seen order), then shuffled position.
    """
    by_class = {}
    for e in entries:
        by_class.setdefault(e[key], []).append(e)
    train, test = [], []
    for label, items in by_class.items():
        if len(items) < 2:
            raise ValueError(f"class {label} has {len(items)} sample(s); at least 2 needed")
        idx = np.arange(len(items))
        cls_seed = CLASS_NAMES.index(label) if label in CLASS_NAMES else len(train)
        np.random.default_rng([seed, cls_seed]).shuffle(idx)
        cut = int(math.floor(ratio * len(items)))
        train += [items[i] for i in idx[:cut]]
        test += [items[i] for i in idx[cut:]]
    return train, test


def image_to_input(img: np.ndarray, px: Optional[int] = None) -> np.ndarray:
    """HWC uint8 image -> CHW float32 in [0, 1], resized to ``px`` if given."""
    if px is not None and img.shape[:2] != (px, px):
        img = resize_bilinear(img, px, px)
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


def load_images(entries: Sequence[dict], image_dir, px: Optional[int] = None):
    """Stack the images of manifest ``entries`` into ``(X, y)``."""
    image_dir = Path(image_dir)
    if not entries:
        return np.zeros((0, 3, px or 1, px or 1), np.float32), np.zeros(0, np.int64)
    X = np.stack([image_to_input(load_png(image_dir / e["image_path"]), px) for e in entries])
    y = np.array([CLASS_NAMES.index(e["class_label"]) for e in entries], dtype=np.int64)
    return X, y


def recalibrate_bn(model, X: np.ndarray, batch_size: int = 16, seed: int = 0) -> None:
    """Set every BN running mean/var to the average of its per-batch statistics over ``X``.

    Weights are unchanged. Afterwards the inference statistics depend on the
    trained weights and the data, not on which minibatches came last in training.
    """
    bns = [layer for layer in model._all_layers() if isinstance(layer, BatchNorm2d)]
    if not bns or len(X) == 0:
        return
    momenta = [b.momentum for b in bns]
    for b in bns:
        b.running_mean[...] = 0
        b.running_var[...] = 0
    order = np.random.default_rng([seed, 2]).permutation(len(X))
    dtype = bns[0].running_mean.dtype
    model.train()
    try:
        for k, start in enumerate(range(0, len(X), batch_size), 1):
            for b in bns:
                b.momentum = 1.0 / k  # EMA with momentum 1/k is the running average
            model.forward(X[order[start:start + batch_size]].astype(dtype, copy=False))
    finally:
        for b, m in zip(bns, momenta):
            b.momentum = m
        model.eval()


class TrainingDiverged(FloatingPointError):
    pass


def predict_logits(model, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = [model.forward(X[i:i + batch_size].astype(model.dtype, copy=False))
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def stderr_progress(record: dict) -> None:
    print("epoch {epoch:3d}  lr {lr:.2e}  loss {train_loss:.4f}  train {train_acc:.4f}  "
          "test {test_acc}".format(**{**record, "test_acc": (
              "-" if record["test_acc"] is None else f"{record['test_acc']:.4f}")}),
          file=sys.stderr, flush=True)


def train(model, train_set, cfg: TrainConfig, test_set=None,
          progress: Optional[Callable[[dict], None]] = None, checkpoint=None) -> List[dict]:
    """Train ``model`` in place with Nadam and a per-epoch cosine learning rate.

    ``train_set`` and ``test_set`` are ``(X, y)`` pairs. Returns one history
    record per epoch: epoch, lr, train_loss, train_acc, test_acc.
    """
    from .nn.checkpoint import save_model

    cfg.validate()
    X, y = train_set
    if len(X) == 0:
        raise ValueError("training set is empty")
    if y.min() < 0 or y.max() >= model.config.num_classes:
        raise ValueError("labels outside [0, num_classes)")
    opt = Nadam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        model.train()
        order = rng.permutation(len(X))
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = X[idx].astype(model.dtype, copy=False)
            logits = model.forward(xb)
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch {b}, lr {lr:.3e}")
            opt.zero_grad()
            model.backward(dlogits.astype(model.dtype, copy=False))
            opt.step(lr)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        test_acc = None
        if test_set is not None and len(test_set[0]):
            test_acc = float((predict_logits(model, test_set[0]).argmax(1) == test_set[1]).mean())
        record = {"epoch": epoch, "lr": lr, "train_loss": total_loss / len(X),
                  "train_acc": correct / len(X), "test_acc": test_acc}
        history.append(record)
        if progress is not None:
            progress(record)
    if cfg.precise_bn and cfg.epochs > 0:
        recalibrate_bn(model, X, cfg.batch_size, cfg.seed)
    model.eval()
    if checkpoint is not None:
        save_model(model, checkpoint, extra={"epochs": cfg.epochs, "seed": cfg.seed})
    return history


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "test_acc"])
        for r in history:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]),
                        "" if r["test_acc"] is None else repr(r["test_acc"])])


@dataclass
class Metrics:
    overall_accuracy: float
    per_class_accuracy: List[Optional[float]]
    one_vs_rest_accuracy: List[float]
    confusion: List[List[int]]
    class_names: List[str] = field(default_factory=lambda: list(CLASS_NAMES))

    @property
    def total(self) -> int:
        return int(np.sum(self.confusion))

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["true\\pred"] + self.class_names)
                for name, row in zip(self.class_names, self.confusion):
                    w.writerow([name] + list(row))


def metrics_from_predictions(y_true, y_pred, num_classes: int) -> Metrics:
    """Confusion matrix (rows true, columns predicted) and the accuracies derived from it.

    Per-class accuracy is recall; one-vs-rest accuracy is (TP + TN) / total.
    Classes absent from ``y_true`` get a per-class accuracy of None.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty test set")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    total = int(cm.sum())
    diag = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    per_class = [None if rows[i] == 0 else float(diag[i] / rows[i]) for i in range(num_classes)]
    ovr = [float((total - rows[i] - cols[i] + 2 * diag[i]) / total) for i in range(num_classes)]
    names = list(CLASS_NAMES[:num_classes]) if num_classes <= len(CLASS_NAMES) else \
        [f"C{i + 1}" for i in range(num_classes)]
    return Metrics(overall_accuracy=float(diag.sum() / total), per_class_accuracy=per_class,
                   one_vs_rest_accuracy=ovr, confusion=cm.tolist(), class_names=names)


def evaluate(model, test_set) -> Metrics:
    X, y = test_set
    if len(X) == 0:
        raise ValueError("cannot evaluate an empty test set")
    pred = predict_logits(model, X).argmax(axis=1)
    return metrics_from_predictions(y, pred, model.config.num_classes)


def predict(model, image_path) -> Tuple[str, np.ndarray]:
    """Label and softmax confidences for one PNG (resized to the model input if needed)."""
    try:
        img = load_png(image_path)
    except Exception as exc:
        raise ValueError(f"cannot read image {image_path}: {exc}") from exc
    x = image_to_input(img, model.config.input_px)[None]
    probs = softmax(predict_logits(model, x).astype(np.float64))[0]
    return CLASS_NAMES[int(np.argmax(probs))], probs
