"""Big/little inference over one variable-width compiled model.

The narrow path runs first; when the margin between its two most likely
classes exceeds the threshold its label is committed, otherwise the full
width runs as well.  Costs are in the engine's cycle units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import WindowedDataset, metrics, pareto_indices
from .engine import CompiledModel, compile_model, cost_report, integer_forward
from .errors import ConfigurationError, DataError, DimensionError, DomainError, SelectionError
from .mixed import softmax

SMALL_WIDTHS = (0.25, 0.5)
POLICY_UNITS_PER_CLASS = 1.0


def default_thresholds() -> np.ndarray:
    return np.concatenate([[0.0], np.logspace(-4, 0, 100)])


def score_margin(probs) -> float:
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise DimensionError("score margin of an empty vector")
    if p.size == 1:
        return float(p[0])
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def _margins(probs) -> np.ndarray:
    if probs.shape[1] == 1:
        return probs[:, 0].copy()
    top2 = np.partition(probs, -2, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def expected_cost(c_small: float, c_policy: float, c_big: float, p_e: float) -> float:
    if not 0.0 <= p_e <= 1.0:
        raise DomainError(f"P_e = {p_e} outside [0, 1]")
    if min(c_small, c_policy, c_big) < 0:
        raise DomainError("costs must be non-negative")
    return c_small + c_policy + (1.0 - p_e) * c_big


def check_backbone(arch) -> None:
    if set(arch.w_bits) == {1} and set(arch.a_bits) == {1}:
        raise ConfigurationError(
            "adaptive inference refuses all-1-bit backbones: binary-network score margins are poorly calibrated")


@dataclass
class AdaptiveModel:
    backbone: CompiledModel
    w_small: float
    threshold: float = 0.5
    policy_units_per_class: float = POLICY_UNITS_PER_CLASS

    def __post_init__(self):
        check_backbone(self.backbone.arch)
        if self.w_small not in SMALL_WIDTHS:
            raise ConfigurationError(f"small width must be one of {SMALL_WIDTHS}, got {self.w_small}")
        for w in (self.w_small, 1.0):
            if w not in self.backbone.widths:
                raise ConfigurationError(f"backbone lacks a requantization bank for width {w}")
        if not 0.0 <= self.threshold <= 1.0:
            raise DomainError(f"threshold {self.threshold} outside [0, 1]")

    @property
    def c_small(self) -> float:
        return cost_report(self.backbone, self.w_small).cycle_units

    @property
    def c_big(self) -> float:
        return cost_report(self.backbone, 1.0).cycle_units

    @property
    def c_policy(self) -> float:
        return self.policy_units_per_class * self.backbone.arch.n_classes

    def probs(self, codes, width) -> np.ndarray:
        return softmax(integer_forward(self.backbone, codes, width) * self.backbone.score_scale)

    def adaptive_triple(self) -> tuple:
        return (self.w_small, self.threshold, self.policy_units_per_class)


def build_adaptive(model, w_small: float, threshold: float = 0.5, theta=None) -> AdaptiveModel:
    """Compile a slimmable-trained network with banks for ``w_small`` and full width."""
    check_backbone(model.arch)
    return AdaptiveModel(compile_model(model, (w_small, 1.0), theta), w_small, threshold)


def adaptive_classify(am: AdaptiveModel, codes) -> tuple:
    """``(label, used_big, cost_units)`` for one 8-bit input window."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise DimensionError("adaptive_classify takes one [channels, length] window")
    p_small = am.probs(codes, am.w_small)
    cost = am.c_small + am.c_policy
    if score_margin(p_small) > am.threshold:
        return int(np.argmax(p_small)), False, cost
    p_big = am.probs(codes, 1.0)
    return int(np.argmax(p_big)), True, cost + am.c_big


@dataclass
class SweepPoint:
    threshold: float
    score: float  # balanced accuracy
    p_e: float
    avg_cost: float
    predicted_cost: float


@dataclass
class PathOutputs:
    """Both paths evaluated once over a dataset; thresholds only re-select."""

    small_pred: np.ndarray
    big_pred: np.ndarray
    margin: np.ndarray
    labels: np.ndarray
    n_classes: int
    c_small: float
    c_policy: float
    c_big: float
    extra: dict = field(default_factory=dict)

    def at(self, threshold: float):
        """Labels, big-model flags and per-input costs at one threshold."""
        used_big = ~(self.margin > threshold)
        pred = np.where(used_big, self.big_pred, self.small_pred)
        cost = self.c_small + self.c_policy + used_big * self.c_big
        return pred, used_big, cost


def run_paths(am: AdaptiveModel, data: WindowedDataset) -> PathOutputs:
    if len(data) == 0:
        raise DataError("threshold sweep on an empty dataset")
    codes = am.backbone.quantize_input(data.x)
    ps = am.probs(codes, am.w_small)
    pb = am.probs(codes, 1.0)
    return PathOutputs(ps.argmax(axis=1), pb.argmax(axis=1), _margins(ps), data.y, data.n_classes,
                       am.c_small, am.c_policy, am.c_big)


def threshold_sweep(am: AdaptiveModel, data: WindowedDataset, thresholds=None, paths=None) -> list:
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    paths = run_paths(am, data) if paths is None else paths
    out = []
    for t in thresholds:
        pred, used_big, cost = paths.at(float(t))
        p_e = float(1.0 - used_big.mean())
        out.append(SweepPoint(float(t), metrics(pred, paths.labels, paths.n_classes).balanced_accuracy, p_e,
                              float(cost.mean()), expected_cost(paths.c_small, paths.c_policy, paths.c_big, p_e)))
    return out


def sweep_csv(points) -> str:
    lines = ["threshold,score,p_e,avg_cost,predicted_cost"]
    lines += [f"{p.threshold!r},{p.score!r},{p.p_e!r},{p.avg_cost!r},{p.predicted_cost!r}" for p in points]
    return "\n".join(lines) + "\n"


def write_sweep(points, path) -> None:
    Path(path).write_text(sweep_csv(points))


def read_sweep(path) -> list:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != "threshold,score,p_e,avg_cost,predicted_cost":
        raise DataError(f"{path}: not a threshold sweep table")
    return [SweepPoint(*(float(v) for v in r.split(","))) for r in rows[1:] if r.strip()]


def pick_threshold(points, reference_score: float, max_drop: float = 0.005) -> SweepPoint:
    """Lowest threshold from which every larger threshold keeps the score within
    ``max_drop`` of ``reference_score``.

    Cost only grows with the threshold, so this is the cheapest point whose
    whole tail also satisfies the budget; a lone lucky dip is not picked.
    """
    ordered = sorted(points, key=lambda p: p.threshold)
    pick = ordered[-1]
    for p in reversed(ordered):
        if p.score < reference_score - max_drop - 1e-12:
            break
        pick = p
    return pick


def select_backbone(points, max_drop: float = 5.0) -> int:
    """Gain-based pick over a Pareto list ordered by increasing score.

    Scores are in percentage points.  ``G_i = (P_i - P_{i-1}) / (C_i - C_{i-1})``;
    only models less than ``max_drop`` points below the best score compete;
    pairs with no cost change are skipped; ties go to the cheaper model.
    """
    points = [(float(s), float(c)) for s, c in points]
    if len(points) < 2:
        raise SelectionError("backbone selection needs at least two Pareto-optimal models")
    scores = [p[0] for p in points]
    if any(b < a for a, b in zip(scores, scores[1:])):
        raise SelectionError("Pareto list must be ordered by increasing score")
    best = max(scores)
    candidates = []
    for i in range(1, len(points)):
        d_cost = points[i][1] - points[i - 1][1]
        if d_cost == 0 or best - points[i][0] >= max_drop:
            continue
        candidates.append(((points[i][0] - points[i - 1][0]) / d_cost, -points[i][1], i))
    if not candidates:
        raise SelectionError("no eligible model pair with a cost difference")
    return max(candidates)[2]


def dominant_areas(sweeps: dict) -> dict:
    """Staircase area each sweep owns on the merged ``(score up, cost down)`` front.

    Every point of the merged front owns the rectangle from its cost to the
    next front point's cost (the last one to the largest cost seen), and from
    the lowest front score up to its own score.  Exact duplicates are credited
    to the first sweep key in sorted order.
    """
    tagged = [(w, p) for w in sorted(sweeps) for p in sweeps[w]]
    if not tagged:
        return {w: 0.0 for w in sweeps}
    scores = [p.score for _, p in tagged]
    costs = [p.avg_cost for _, p in tagged]
    front = sorted(pareto_indices(scores, costs, list(range(len(tagged)))), key=lambda i: costs[i])
    ref_cost = max(costs)
    ref_score = min(scores[i] for i in front)
    areas = {w: 0.0 for w in sweeps}
    for j, i in enumerate(front):
        nxt = costs[front[j + 1]] if j + 1 < len(front) else ref_cost
        areas[tagged[i][0]] += (nxt - costs[i]) * (scores[i] - ref_score)
    return areas


def choose_width(model, data: WindowedDataset, thresholds=None, theta=None) -> tuple:
    """Sweep both small widths on ``data``; returns ``(w_small, {width: sweep})``.

    The width owning more of the merged Pareto front's area wins; ties go to 0.25.
    """
    sweeps = {w: threshold_sweep(build_adaptive(model, w, theta=theta), data, thresholds) for w in SMALL_WIDTHS}
    areas = dominant_areas(sweeps)
    pick = 0.5 if areas[0.5] > areas[0.25] * (1 + 1e-12) else 0.25
    return pick, sweeps
