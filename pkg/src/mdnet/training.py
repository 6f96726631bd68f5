"""Losses, RMSProp, the mini-batch training loop and evaluation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers as L
from .data import LabeledSet, center_crop_batch, random_crop_batch
from .errors import DataError, InternalError, LabelError
from .tensor import make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    dropout_rate: float | None = None  # overrides every dropout layer when set
    noise_std: float = 0.0
    crop_length: int | None = None
    seed: int = 0
    dtype: str = "float32"


@dataclass
class MetricsReport:
    per_class_accuracy: dict[int, float]
    confusion_matrix: np.ndarray
    total_accuracy: float
    loss_history: list[float] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    @property
    def counts(self) -> np.ndarray:
        return self.confusion_matrix.sum(axis=1)

    @property
    def sensitivity(self) -> float:
        """Accuracy on class 1 (the positive class of binary tasks)."""
        return self.per_class_accuracy[1]

    @property
    def specificity(self) -> float:
        return self.per_class_accuracy[0]

    def to_dict(self) -> dict[str, Any]:
        names = self.class_names or [str(c) for c in range(len(self.confusion_matrix))]
        return {
            "total_accuracy": round(float(self.total_accuracy), 10),
            "per_class_accuracy": {
                names[c]: round(float(v), 10) for c, v in sorted(self.per_class_accuracy.items())
            },
            "confusion_matrix": self.confusion_matrix.astype(int).tolist(),
            "class_names": list(names),
            "loss_history": [round(float(v), 10) for v in self.loss_history],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricsReport":
        names = d["class_names"]
        return cls(
            per_class_accuracy={i: float(d["per_class_accuracy"][n]) for i, n in enumerate(names)},
            confusion_matrix=np.asarray(d["confusion_matrix"], dtype=np.int64),
            total_accuracy=float(d["total_accuracy"]),
            loss_history=list(d.get("loss_history", [])),
            class_names=list(names),
        )

    def write_json(self, path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_confusion_csv(self, path) -> None:
        names = self.class_names or [str(c) for c in range(len(self.confusion_matrix))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *names, "total"])
            for name, row in zip(names, self.confusion_matrix):
                w.writerow([name, *[int(v) for v in row], int(row.sum())])

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(self.loss_history, 1):
                w.writerow([i, repr(float(v))])


# -- losses --------------------------------------------------------------------


def bce_loss(logits, targets):
    """Mean binary cross entropy on logits, in the overflow-free form."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    B = z.shape[0]
    grad = (L._sigmoid(z) - t) / B
    return float(per.sum() / B), grad.astype(np.asarray(logits).dtype)


def softmax_ce_loss(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B, C = z.shape
    if labels.shape != (B,) or np.any(labels < 0) or np.any(labels >= C):
        raise LabelError(f"labels must lie in [0, {C})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), (grad / B).astype(np.asarray(logits).dtype)


def task_loss(logits, labels):
    if logits.shape[1] == 1:
        return bce_loss(logits, np.asarray(labels, dtype=np.float64)[:, None])
    return softmax_ce_loss(logits, labels)


# -- optimizer -------------------------------------------------------------------


def rmsprop_step(state, grads, opt_state, lr=1e-3, decay=0.9, eps=1e-8):
    """In-place RMSProp update; returns (state, opt_state).

    s <- decay*s + (1-decay)*g^2 ;  theta <- theta - lr*g/(sqrt(s)+eps)
    """
    expected = set(L.trainable_keys(state))
    if set(grads) != expected:
        missing = sorted(expected - set(grads))
        extra = sorted(set(grads) - expected)
        raise InternalError(f"gradient keys do not match state (missing {missing}, extra {extra})")
    for key, g in grads.items():
        s = opt_state.get(key)
        if s is None:
            s = np.zeros_like(state[key])
        s = decay * s + (1.0 - decay) * g * g
        opt_state[key] = s.astype(state[key].dtype, copy=False)
        state[key] = (state[key] - lr * g / (np.sqrt(s) + eps)).astype(state[key].dtype, copy=False)
    return state, opt_state


# -- training loop ---------------------------------------------------------------


def _fit_input(spec, X, rng=None, crop_length=None):
    """Crop instances to the network's time length (random when rng given)."""
    T_in = spec.input_shape[0]
    if X.ndim < 3 or X.shape[1] == T_in:
        return X
    if rng is not None:
        return random_crop_batch(X, crop_length or T_in, rng)
    return center_crop_batch(X, T_in)


def train(spec, state, train_set: LabeledSet, val_set: LabeledSet | None, cfg: TrainConfig):
    """Mini-batch RMSProp training. Returns (new state, report on val_set).

    The input state is not modified. Per batch: random temporal crop, optional
    Gaussian noise, forward, loss, backward, update.
    """
    if len(train_set) == 0:
        raise DataError("empty training set")
    if val_set is not None and len(val_set) == 0:
        raise DataError("empty validation set")
    n_out = spec.output_units
    expected_classes = 2 if n_out == 1 else n_out
    if train_set.num_classes != expected_classes:
        raise LabelError(
            f"dataset has {train_set.num_classes} classes but the network has {n_out} outputs"
        )
    if cfg.crop_length is not None and cfg.crop_length != spec.input_shape[0]:
        raise DataError("crop_length must equal the network input length")
    if cfg.dropout_rate is not None:
        spec = spec.with_dropout(cfg.dropout_rate)
    dtype = np.dtype(cfg.dtype)
    state = {k: v.astype(dtype) for k, v in state.items()}
    rng = make_rng(cfg.seed)
    opt_state: dict[str, np.ndarray] = {}
    X_all = train_set.instances.astype(dtype)
    y_all = train_set.labels
    n = len(train_set)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = _fit_input(spec, X_all[idx], rng, cfg.crop_length)
            if cfg.noise_std > 0:
                xb = xb + rng.normal(0.0, cfg.noise_std, size=xb.shape).astype(dtype)
            out, cache = L.forward(spec, state, xb, "train", rng)
            loss, grad = task_loss(out, y_all[idx])
            grads = L.backward(spec, state, cache, grad)
            rmsprop_step(state, grads, opt_state, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps)
            total += loss * len(idx)
            seen += len(idx)
        history.append(total / max(seen, 1))
        log.debug("epoch %d loss %.5f", epoch + 1, history[-1])
    report = evaluate(spec, state, val_set if val_set is not None else train_set)
    report.loss_history = history
    return state, report


def predict_logits(spec, state, X, batch_size: int = 1024, q8=None) -> np.ndarray:
    X = np.asarray(X)
    dtype = next(iter(state.values())).dtype if state else X.dtype
    outs = []
    for start in range(0, len(X), batch_size):
        xb = _fit_input(spec, X[start:start + batch_size].astype(dtype, copy=False))
        out, _ = L.forward(spec, state, xb, "eval", q8=q8)
        outs.append(out)
    return np.concatenate(outs, axis=0)


def logits_to_labels(logits) -> np.ndarray:
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)  # sigmoid(z) > 0.5
    return logits.argmax(axis=1)


def predict(spec, state, X, batch_size: int = 1024, q8=None) -> np.ndarray:
    return logits_to_labels(predict_logits(spec, state, X, batch_size, q8))


def metrics_from_predictions(y_true, y_pred, num_classes, class_names=None) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    counts = cm.sum(axis=1)
    per_class = {
        c: (float(cm[c, c] / counts[c]) if counts[c] else float("nan")) for c in range(num_classes)
    }
    total = float(np.trace(cm) / cm.sum()) if cm.sum() else float("nan")
    return MetricsReport(per_class, cm, total, [], list(class_names or []))


def evaluate(spec, state, data: LabeledSet, q8=None) -> MetricsReport:
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty set")
    y_pred = predict(spec, state, data.instances, q8=q8)
    return metrics_from_predictions(data.labels, y_pred, data.num_classes, data.class_names)


def pseudo_label_adapt(spec, state, unlabeled, cfg: TrainConfig, num_classes: int | None = None):
    """Self-training: label ``unlabeled`` with the current model, then fit on it.

    Runs ``cfg.epochs`` epochs of supervised training on the guessed labels
    and returns the new state.
    """
    X = np.asarray(unlabeled)
    if len(X) == 0:
        raise DataError("empty unlabeled set")
    if cfg.epochs == 0:
        return L.copy_state(state)
    guessed = predict(spec, state, X)
    k = num_classes or (2 if spec.output_units == 1 else spec.output_units)
    pseudo = LabeledSet(X.copy(), guessed, k)
    new_state, _ = train(spec, state, pseudo, None, cfg)
    return new_state
