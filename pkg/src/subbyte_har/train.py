"""Quantization-aware training: fixed precision and slimmable multi-width.

Protocol: Adam, LR x0.1 after ``lr_patience`` epochs without training-loss
improvement, early stop ``early_stop_patience`` epochs after the best holdout
balanced accuracy, class weights inverse to training frequencies, and a
stratified random 25% holdout used for snapshot selection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import WindowedDataset, class_weights, metrics, stratified_split
from .errors import ConfigurationError, DataError, NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainProtocol:
    initial_lr: float = 0.01
    batch_size: int = 32
    lr_decay_factor: float = 0.1
    lr_patience: int = 3
    early_stop_patience: int = 5
    weight_decay: float = 0.0
    max_epochs: int = 100
    class_weights: np.ndarray | None = None
    seed: int = 0
    holdout_fraction: float = 0.25

    def __post_init__(self):
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patience values must be positive")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0):
                raise ConfigurationError("class weights must be strictly positive")

    def key(self) -> str:
        """Stable text form used in result digests."""
        cw = "auto" if self.class_weights is None else ",".join(repr(float(v)) for v in self.class_weights)
        return (f"lr={self.initial_lr!r};bs={self.batch_size};decay={self.lr_decay_factor!r};"
                f"lrp={self.lr_patience};esp={self.early_stop_patience};wd={self.weight_decay!r};"
                f"epochs={self.max_epochs};cw={cw};seed={self.seed};hold={self.holdout_fraction!r}")


def weighted_cross_entropy(scores, labels, weights):
    """Mean over the batch of ``w[label] * -log softmax(scores)[label]``.

    Returns ``(loss, dloss/dscores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite class scores")
    n = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    w = np.asarray(weights, dtype=np.float64)[labels]
    rows = np.arange(n)
    loss = float(np.mean(-w * logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= (w / n)[:, None]
    return loss, grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """In-place Adam update with bias correction; decoupled weight decay on
    weight tensors (names ending in ``.w``)."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        if weight_decay > 0 and name.endswith(".w"):
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def evaluate(model, data: WindowedDataset, width: float = 1.0):
    return metrics(model.predict(data.x, width), data.y, data.n_classes)


def _fit(model, data: WindowedDataset, protocol: TrainProtocol, widths, extra_loss=None, echo=None):
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    if protocol.max_epochs <= 0:
        return model
    for w in widths:
        if w not in model.widths:
            raise ConfigurationError(f"width {w} missing from the model's BatchNorm banks {model.widths}")
    rng = np.random.default_rng(protocol.seed)
    if model.quantized:
        model.calibrate(data.x)
    train_idx, hold_idx = stratified_split(data.y, protocol.holdout_fraction, rng)
    if hold_idx.size == 0:
        hold_idx = train_idx
    hold = data.subset(hold_idx)
    cw = protocol.class_weights
    if cw is None:
        cw = class_weights(data.y[train_idx], data.n_classes)
    state = AdamState()
    params = model.parameters()
    lr = protocol.initial_lr
    best_loss, stale = np.inf, 0
    best_score, best_epoch, best = -np.inf, 0, model.copy()
    history = []
    for epoch in range(1, protocol.max_epochs + 1):
        perm = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(perm), protocol.batch_size):
            idx = perm[start:start + protocol.batch_size]
            xb, yb = data.x[idx], data.y[idx]
            acc, batch_loss = None, 0.0
            for w in widths:
                scores = model.forward(xb, w, train=True)
                loss, gscores = weighted_cross_entropy(scores, yb, cw)
                grads = model.backward(gscores)
                batch_loss += loss
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            if extra_loss is not None:
                add, gadd = extra_loss(model)
                batch_loss += add
                for k, g in gadd.items():
                    acc[k] = acc[k] + g
            if not np.isfinite(batch_loss):
                raise NumericError(f"training diverged at epoch {epoch}")
            adam_step(params, acc, state, lr, protocol.weight_decay)
            model.clamp_alphas()
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise NumericError(f"parameters became non-finite at epoch {epoch}")
            total += batch_loss * len(idx)
        train_loss = total / len(train_idx)
        score = float(np.mean([evaluate(model, hold, w).balanced_accuracy for w in widths]))
        history.append({"epoch": epoch, "loss": train_loss, "holdout_score": score, "lr": lr})
        line = f"epoch={epoch} loss={train_loss:.6f} holdout_bacc={score:.4f} lr={lr:.3g}"
        log.info(line)
        if echo is not None:
            echo(line)
        if score > best_score:
            best_score, best_epoch, best = score, epoch, model.copy()
        if train_loss < best_loss:
            best_loss, stale = train_loss, 0
        else:
            stale += 1
            if stale >= protocol.lr_patience:
                lr *= protocol.lr_decay_factor
                stale = 0
        if epoch - best_epoch >= protocol.early_stop_patience:
            break
    best.history = history
    best._caches = None
    return best


def train_fixed(model, data: WindowedDataset, protocol: TrainProtocol, echo=None):
    """QAT at the model's fixed bit-widths; returns the best-holdout snapshot."""
    return _fit(model, data, protocol, (1.0,), echo=echo)


def train_slimmable(model, data: WindowedDataset, protocol: TrainProtocol, widths=(0.25, 0.5, 1.0), echo=None):
    """Per batch, sum gradients from forward/backward at every width, then step once."""
    return _fit(model, data, protocol, tuple(widths), echo=echo)


def history_csv(history) -> str:
    lines = ["epoch,loss,holdout_score,lr"]
    lines += [f"{h['epoch']},{h['loss']!r},{h['holdout_score']!r},{h['lr']!r}" for h in history]
    return "\n".join(lines) + "\n"
