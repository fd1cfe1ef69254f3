"""Windowed datasets, CSV I/O, the synthetic HAR stand-in, splits and metrics.

CSV layout (version 1): an optional header comment
``# subbyte-har-csv v1 channels=C length=L classes=K rate=R``, then one row per
window holding ``C * L`` values flattened channel-major followed by the
integer label.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, FormatError

CSV_VERSION = 1
_CLASS_SEED = 20221
_HEADER = re.compile(r"#\s*subbyte-har-csv\s+v(\d+)(.*)")


@dataclass
class WindowedDataset:
    x: np.ndarray  # [n, channels, length]
    y: np.ndarray  # [n]
    n_classes: int
    class_names: list = field(default_factory=list)
    rate: float = 50.0
    easy: np.ndarray | None = None  # synthetic only: True for low-noise windows

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3:
            raise DimensionError(f"windows must be [n, channels, length], got {self.x.shape}")
        if len(self.x) != len(self.y):
            raise DimensionError("window and label counts differ")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if not self.class_names:
            self.class_names = [f"class{c}" for c in range(self.n_classes)]

    def __len__(self):
        return len(self.y)

    @property
    def channels(self) -> int:
        return self.x.shape[1]

    @property
    def length(self) -> int:
        return self.x.shape[2]

    @property
    def window_seconds(self) -> float:
        return self.length / self.rate

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        easy = None if self.easy is None else self.easy[idx]
        return WindowedDataset(self.x[idx], self.y[idx], self.n_classes, list(self.class_names), self.rate, easy)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(str(self.n_classes).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class CsvSchema:
    channels: int
    length: int
    n_classes: int | None = None
    rate: float = 50.0


# -- CSV I/O ---------------------------------------------------------------

def save_csv(ds: WindowedDataset, path) -> None:
    lines = [f"# subbyte-har-csv v{CSV_VERSION} channels={ds.channels} length={ds.length} "
             f"classes={ds.n_classes} rate={ds.rate!r}"]
    flat = ds.x.reshape(len(ds), -1)
    for row, label in zip(flat, ds.y):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str) -> dict:
    m = _HEADER.match(line)
    if not m:
        return {}
    if int(m.group(1)) != CSV_VERSION:
        raise FormatError(f"unsupported CSV version {m.group(1)}")
    return dict(kv.split("=", 1) for kv in m.group(2).split())


def load_csv(path, schema: CsvSchema | None = None) -> WindowedDataset:
    """Read a windowed CSV; ``schema`` overrides/replaces the header."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    lines = path.read_text().splitlines()
    header = {}
    if lines and lines[0].startswith("#"):
        header = _parse_header(lines[0])
    if schema is None:
        if not header:
            raise DataError(f"{path}: no schema given and no header line found")
        schema = CsvSchema(int(header["channels"]), int(header["length"]),
                           int(header["classes"]) if "classes" in header else None,
                           float(header.get("rate", 50.0)))
    width = schema.channels * schema.length
    rows, labels = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != width + 1:
            raise FormatError(f"{path}:{lineno}: expected {width + 1} fields, found {len(fields)}")
        try:
            values = [float(v) for v in fields[:-1]]
            label = int(fields[-1])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{path}:{lineno}: non-finite sample value")
        if label < 0 or (schema.n_classes is not None and label >= schema.n_classes):
            raise DataError(f"{path}:{lineno}: label {label} outside [0, {schema.n_classes})")
        rows.append(values)
        labels.append(label)
    if not rows:
        raise DataError(f"{path}: no windows found")
    n_classes = schema.n_classes if schema.n_classes is not None else max(labels) + 1
    x = np.array(rows).reshape(len(rows), schema.channels, schema.length)
    return WindowedDataset(x, np.array(labels), n_classes, rate=schema.rate)


# -- synthetic data ----------------------------------------------------------

def synth_har(n_per_class: int, n_classes: int, channels: int = 3, length: int = 64,
              easy_fraction: float = 0.7, seed: int = 0, rate: float = 50.0) -> WindowedDataset:
    """Sinusoidal stand-in for accelerometer windows.

    Class ``c`` oscillates at ``2 + 2c`` cycles per window with class-specific
    per-channel gains.  Easy windows carry mild noise; hard windows get strong
    noise and a frequency pushed part-way toward a neighbouring class.
    """
    if n_per_class < 1 or n_classes < 2 or channels < 1 or length < 4:
        raise DataError("synth_har needs n_per_class >= 1, n_classes >= 2, channels >= 1, length >= 4")
    if not 0.0 <= easy_fraction <= 1.0:
        raise DataError("easy_fraction must lie in [0, 1]")
    spacing = 2.0
    freqs = 2.0 + spacing * np.arange(n_classes)
    # class structure is shared by every seed so separately drawn splits agree
    gains = np.random.default_rng(_CLASS_SEED).uniform(0.5, 1.5, size=(n_classes, channels))
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    n = n_per_class * n_classes
    y = np.repeat(np.arange(n_classes), n_per_class)
    n_easy = int(round(easy_fraction * n_per_class))
    easy = np.tile(np.arange(n_per_class) < n_easy, n_classes)
    x = np.empty((n, channels, length))
    for i in range(n):
        c = y[i]
        if easy[i]:
            f = freqs[c] + rng.uniform(-0.15, 0.15) * spacing
            noise = 0.15
        else:
            toward = rng.choice([-1.0, 1.0]) if 0 < c < n_classes - 1 else (1.0 if c == 0 else -1.0)
            f = freqs[c] + toward * rng.uniform(0.25, 0.45) * spacing
            noise = 0.9
        amp = rng.uniform(0.8, 1.2)
        phase = rng.uniform(0, 2 * np.pi, size=channels)
        x[i] = (amp * gains[c][:, None] * np.sin(2 * np.pi * f * t[None, :] + phase[:, None])
                + noise * rng.standard_normal((channels, length)))
    order = rng.permutation(n)
    return WindowedDataset(x[order], y[order], n_classes, rate=rate, easy=easy[order])


# -- splits and weights --------------------------------------------------------

def stratified_split(labels, fraction: float, rng) -> tuple:
    """Per-class random split; returns ``(kept_idx, held_out_idx)``."""
    labels = np.asarray(labels)
    keep, hold = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_hold = int(round(fraction * len(idx)))
        hold.append(idx[:n_hold])
        keep.append(idx[n_hold:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))


def class_weights(labels, n_classes: int | None = None) -> np.ndarray:
    """``total / (n_classes * count_c)`` so balanced data gets all-ones."""
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} absent from training labels")
    return len(labels) / (n_classes * counts.astype(np.float64))


# -- metrics -----------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class

    def to_csv(self) -> str:
        k = self.counts.shape[0]
        lines = ["true\\pred," + ",".join(str(c) for c in range(k))]
        lines += [f"{i}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(self.counts)]
        return "\n".join(lines) + "\n"

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


@dataclass
class Metrics:
    accuracy: float
    balanced_accuracy: float
    macro_f1: float
    confusion: ConfusionMatrix

    def as_row(self) -> dict:
        return {"accuracy": self.accuracy, "balanced_accuracy": self.balanced_accuracy, "macro_f1": self.macro_f1}


def confusion_matrix(pred, labels, n_classes: int) -> ConfusionMatrix:
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, pred), 1)
    return ConfusionMatrix(counts)


def metrics(pred, labels, n_classes: int | None = None) -> Metrics:
    """Accuracy, balanced accuracy (mean recall over classes with support) and
    macro F1 (over classes seen in labels or predictions)."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise DimensionError(f"{pred.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise DataError("cannot score an empty prediction set")
    if n_classes is None:
        n_classes = int(max(pred.max(), labels.max())) + 1
    cm = confusion_matrix(pred, labels, n_classes)
    tp = np.diag(cm.counts).astype(np.float64)
    support = cm.counts.sum(axis=1)
    predicted = cm.counts.sum(axis=0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    seen = (support > 0) | (predicted > 0)
    return Metrics(
        accuracy=float(tp.sum() / labels.size),
        balanced_accuracy=float(recall[support > 0].mean()),
        macro_f1=float(f1[seen].mean()),
        confusion=cm,
    )


def balanced_accuracy(pred, labels, n_classes: int | None = None) -> float:
    return metrics(pred, labels, n_classes).balanced_accuracy


# -- Pareto ------------------------------------------------------------------

def pareto_indices(scores, costs, keys=None) -> list:
    """Indices of non-dominated ``(score up, cost down)`` points ordered by score.

    Exact duplicates keep one representative: the smallest key when ``keys``
    is given, else the first occurrence.
    """
    scores = np.asarray(scores, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if scores.size == 0:
        raise DataError("Pareto front of an empty set")
    order = sorted(range(len(scores)), key=lambda i: (costs[i], -scores[i], keys[i] if keys is not None else i))
    front, best = [], -np.inf
    for i in order:
        if scores[i] > best:
            front.append(i)
            best = scores[i]
    return sorted(front, key=lambda i: (scores[i], costs[i]))


def pareto_front(points, keys=None) -> list:
    """Non-dominated subset of ``(score, cost)`` pairs, ordered by score."""
    points = list(points)
    idx = pareto_indices([p[0] for p in points], [p[1] for p in points], keys)
    return [points[i] for i in idx]
