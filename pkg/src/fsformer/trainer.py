"""Adam, the minibatch epoch loop, centralized training and evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import model as nn
from .seqdata import DatasetSplit, SequenceSample, compute_class_weights, stack


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 3e-4
    loss_kind: str = "smooth_l1"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.loss_kind not in nn.LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {nn.LOSS_KINDS}")


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, weights):
        return cls({k: torch.zeros_like(t) for k, t in weights.items()}, {k: torch.zeros_like(t) for k, t in weights.items()})


def adam_step(weights, grads, state: AdamState, hyper: AdamHyper, step_index: int):
    """One bias-corrected Adam update; returns new weights and a new state."""
    if step_index < 1:
        raise ValueError("step_index must be >= 1")
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1 - b1**step_index
    c2 = 1 - b2**step_index
    new_w, new_m, new_v = {}, {}, {}
    for k, w in weights.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        update = hyper.lr * (m / c1) / (torch.sqrt(v / c2) + hyper.eps)
        if not torch.isfinite(update).all():
            raise DivergenceError(f"non-finite Adam update for {k}")
        new_w[k], new_m[k], new_v[k] = w - update, m, v
    return new_w, AdamState(new_m, new_v, step_index)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


GradFn = Callable[[dict, torch.Tensor, torch.Tensor], tuple]


def run_epoch(
    weights: dict,
    state: AdamState,
    x: torch.Tensor,
    y: torch.Tensor,
    batch_size: int,
    hyper: AdamHyper,
    rng: np.random.Generator,
    grad_fn: GradFn,
    anchor: dict | None = None,
    mu: float = 0.0,
):
    """Shuffle, then for every minibatch: gradient, optional proximal term, Adam.

    ``anchor``/``mu`` add mu * (w - anchor) to each gradient (FedProx).
    Returns (weights, state, mean batch loss).
    """
    order = torch.from_numpy(rng.permutation(len(x)))
    losses = []
    for start in range(0, len(x), batch_size):
        idx = order[start : start + batch_size]
        loss, grads = grad_fn(weights, x[idx], y[idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {state.step + 1}")
        if anchor is not None and mu > 0:
            grads = {k: g + mu * (weights[k] - anchor[k]) for k, g in grads.items()}
        weights, state = adam_step(weights, grads, state, hyper, state.step + 1)
        losses.append(loss)
    return weights, state, float(np.mean(losses))


def plain_grad_fn(loss_kind: str, class_weights=None) -> GradFn:
    def fn(weights, xb, yb):
        return nn.backward(xb, yb, weights, None, loss_kind, class_weights)

    return fn


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    class_accuracy: np.ndarray
    class_precision: np.ndarray
    class_recall: np.ndarray
    class_f1: np.ndarray
    confusion: np.ndarray
    present: np.ndarray

    SCALARS = ("accuracy", "precision", "recall", "f1")
    PER_CLASS = ("class_accuracy", "class_precision", "class_recall", "class_f1")

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        out = {k: float(getattr(self, k)) for k in self.SCALARS}
        out.update({k: getattr(self, k).tolist() for k in self.PER_CLASS})
        out["confusion"] = self.confusion.tolist()
        out["present"] = self.present.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        kw = {k: d[k] for k in cls.SCALARS}
        kw.update({k: np.asarray(d[k], dtype=float) for k in cls.PER_CLASS})
        kw["confusion"] = np.asarray(d["confusion"])
        kw["present"] = np.asarray(d["present"], dtype=bool)
        return cls(**kw)


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    """Rows are true classes, columns predictions.

    Per-class accuracy is one-vs-rest (TP + TN) / N. Overall accuracy is
    micro; overall precision/recall/F1 are macro over classes present in the
    true labels. Zero denominators give 0.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    total = cm.sum()
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    present = cm.sum(axis=1) > 0
    return Metrics(
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision=float(precision[present].mean()) if present.any() else 0.0,
        recall=float(recall[present].mean()) if present.any() else 0.0,
        f1=float(f1[present].mean()) if present.any() else 0.0,
        class_accuracy=_safe_div(tp + tn, np.full_like(tp, total)),
        class_precision=precision,
        class_recall=recall,
        class_f1=f1,
        confusion=cm,
        present=present,
    )


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    return np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def evaluate(weights, samples: Sequence[SequenceSample]) -> Metrics:
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    x, y = stack(samples)
    probs = nn.predict_proba(torch.from_numpy(x), weights)
    preds = torch.argmax(probs, dim=-1).numpy()
    n_classes = weights["cls.bias"].shape[0]
    return metrics_from_confusion(confusion_matrix(y, preds, n_classes))


# --------------------------------------------------------------------------
# centralized training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    metrics: Metrics

    def to_dict(self):
        return {"epoch": self.epoch, "train_loss": self.train_loss, **self.metrics.to_dict()}


def to_tensors(samples, dtype=torch.float32):
    x, y = stack(samples)
    return torch.from_numpy(x).to(dtype), torch.from_numpy(y)


def train_centralized(
    split: DatasetSplit,
    model_config: nn.ModelConfig,
    train_config: TrainConfig,
    seed: int | None = None,
    weights: dict | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
):
    """Adam minibatch training; validation metrics after every epoch.

    Epoch ``e`` shuffles with ``derive_rng(seed, e, 0)``, the same stream a
    lone federated client uses, so a one-client federation reproduces it.
    """
    if not split.train:
        raise ValueError("empty training split")
    seed = train_config.seed if seed is None else seed
    if weights is None:
        weights = nn.init_weights(model_config, seed)
    x, y = to_tensors(split.train, weights["proj.weight"].dtype)
    class_weights = None
    if train_config.loss_kind == "weighted_ce":
        class_weights = torch.as_tensor(compute_class_weights(y.numpy(), model_config.classes).weights, dtype=x.dtype)
    grad_fn = plain_grad_fn(train_config.loss_kind, class_weights)
    hyper = AdamHyper(train_config.learning_rate, train_config.beta1, train_config.beta2, train_config.eps)
    state = AdamState.zeros_like(weights)
    history = []
    for epoch in range(train_config.epochs):
        try:
            weights, state, loss = run_epoch(
                weights, state, x, y, train_config.batch_size, hyper, derive_rng(seed, epoch, 0), grad_fn
            )
        except (DivergenceError, nn.NonFiniteError) as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        eval_set = split.validation or split.train
        log = EpochLog(epoch, loss, evaluate(weights, eval_set))
        history.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return weights, history


# --------------------------------------------------------------------------
# emission


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_metrics_csv(path, metrics: Metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "accuracy", "precision", "recall", "f1"])
        for c in range(len(metrics.class_f1)):
            w.writerow([c, f"{metrics.class_accuracy[c]:.6f}", f"{metrics.class_precision[c]:.6f}",
                        f"{metrics.class_recall[c]:.6f}", f"{metrics.class_f1[c]:.6f}"])
        w.writerow(["overall", f"{metrics.accuracy:.6f}", f"{metrics.precision:.6f}",
                    f"{metrics.recall:.6f}", f"{metrics.f1:.6f}"])
