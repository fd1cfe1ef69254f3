import numpy as np
import pytest

from subbyte_har.adaptive import (
    AdaptiveModel,
    PathOutputs,
    SweepPoint,
    adaptive_classify,
    build_adaptive,
    choose_width,
    default_thresholds,
    dominant_areas,
    expected_cost,
    pick_threshold,
    read_sweep,
    run_paths,
    score_margin,
    select_backbone,
    threshold_sweep,
    write_sweep,
)
from subbyte_har.data import WindowedDataset, metrics, synth_har
from subbyte_har.engine import compile_model, cost_report, integer_forward
from subbyte_har.errors import ConfigurationError, DataError, DimensionError, DomainError, SelectionError
from subbyte_har.model_space import ArchConfig, instantiate
from subbyte_har.train import TrainProtocol, train_slimmable


@pytest.fixture(scope="module")
def slim():
    train = synth_har(30, 6, seed=0)
    test = synth_har(15, 6, seed=1)
    arch = ArchConfig("B", (8, 16), 7, (2, 2), (8,) * 3, (8,) * 2, 6)
    return train_slimmable(instantiate(arch, 0), train, TrainProtocol(max_epochs=12)), test


def test_score_margin_examples():
    assert score_margin([0.55, 0.35, 0.10]) == pytest.approx(0.20)
    assert score_margin(np.full(6, 1 / 6)) == 0.0
    assert score_margin([0, 0, 1.0, 0]) == 1.0
    assert score_margin([1.0]) == 1.0
    with pytest.raises(DimensionError):
        score_margin([])


def test_expected_cost_examples():
    assert expected_cost(100, 2, 300, 0.75) == pytest.approx(177)
    assert expected_cost(100, 2, 300, 1.0) == 102
    assert expected_cost(100, 2, 300, 0.0) == 402
    with pytest.raises(DomainError):
        expected_cost(100, 2, 300, 1.5)


def test_policy_hand_case():
    paths = PathOutputs(np.array([0]), np.array([1]), np.array([0.20]), np.array([1]), 3, 10.0, 3.0, 40.0)
    pred, used_big, cost = paths.at(0.3)
    assert used_big[0] and pred[0] == 1 and cost[0] == 53.0
    pred, used_big, cost = paths.at(0.1)
    assert not used_big[0] and pred[0] == 0 and cost[0] == 13.0


def test_default_thresholds():
    t = default_thresholds()
    assert t[0] == 0.0 and t[-1] == 1.0 and len(t) == 101 and np.all(np.diff(t) > 0)


def test_adaptive_classify_endpoints(slim):
    model, test = slim
    am = build_adaptive(model, 0.5, threshold=0.0)
    codes = am.backbone.quantize_input(test.x[:20])
    for c in codes:
        label, used_big, cost = adaptive_classify(am, c)
        p = am.probs(c, 0.5)
        if score_margin(p) > 0:
            assert not used_big and label == int(np.argmax(p)) and cost == am.c_small + am.c_policy
    am.threshold = 1.0
    for c in codes:
        label, used_big, cost = adaptive_classify(am, c)
        assert used_big and label == int(np.argmax(integer_forward(am.backbone, c, 1.0)))
        assert cost == pytest.approx(am.c_small + am.c_policy + am.c_big)


def test_sweep_properties(slim):
    model, test = slim
    am = build_adaptive(model, 0.25)
    paths = run_paths(am, test)
    sweep = threshold_sweep(am, test, paths=paths)
    assert [p.threshold for p in sweep] == default_thresholds().tolist()
    # threshold 0 commits every input with a unique small-path argmax
    assert sweep[0].p_e == pytest.approx(np.mean(paths.margin > 0))
    p_e = [p.p_e for p in sweep]
    cost = [p.avg_cost for p in sweep]
    assert all(b <= a for a, b in zip(p_e, p_e[1:]))
    assert all(b >= a - 1e-9 for a, b in zip(cost, cost[1:]))
    for p in sweep:
        assert p.predicted_cost == pytest.approx(p.avg_cost, rel=1e-9)
    # nested early-commit sets
    early = [set(np.flatnonzero(paths.margin > t)) for t in default_thresholds()]
    assert all(b <= a for a, b in zip(early, early[1:]))
    # endpoint: full-model score, static cost plus the small path and policy overhead
    full = metrics(paths.big_pred, test.y, 6).balanced_accuracy
    static = cost_report(compile_model(model), 1.0).cycle_units
    assert sweep[-1].score == full
    assert sweep[-1].avg_cost == pytest.approx(static + am.c_small + am.c_policy)


def test_sweep_csv_roundtrip(tmp_path):
    pts = [SweepPoint(0.0, 0.9, 1.0, 10.0, 10.0), SweepPoint(0.5, 0.95, 0.4, 30.0, 30.0)]
    write_sweep(pts, tmp_path / "s.csv")
    assert read_sweep(tmp_path / "s.csv") == pts
    (tmp_path / "bad.csv").write_text("x,y\n")
    with pytest.raises(DataError):
        read_sweep(tmp_path / "bad.csv")


def test_pick_threshold_tail_rule():
    pts = [SweepPoint(t, s, 0, 0, 0) for t, s in ((0.0, 0.80), (0.1, 0.90), (0.2, 0.85), (0.3, 0.899), (0.4, 0.90))]
    # 0.1 is within budget but 0.2 is not, so the pick is the start of the tail
    assert pick_threshold(pts, 0.90, 0.005).threshold == 0.3
    assert pick_threshold(pts, 0.90, 0.2).threshold == 0.0


def test_select_backbone_examples():
    assert select_backbone([(70, 100), (80, 200), (81, 400)]) == 1
    assert select_backbone([(50, 100), (90, 1000)]) == 1
    assert select_backbone([(80, 100), (80, 200), (80, 300)]) == 1
    # pairs without a cost change are skipped
    assert select_backbone([(70, 100), (75, 100), (78, 300)]) == 2
    with pytest.raises(SelectionError):
        select_backbone([(80, 10)])
    with pytest.raises(SelectionError):
        select_backbone([(80, 10), (70, 20)])


def test_dominant_areas_identical_sweeps_tie():
    pts = [SweepPoint(t, s, 0, c, c) for t, s, c in ((0, 0.7, 10), (0.5, 0.8, 20), (1, 0.9, 40))]
    areas = dominant_areas({0.25: pts, 0.5: list(pts)})
    assert areas[0.5] == 0.0 and areas[0.25] > 0


def test_choose_width_tie_goes_to_quarter(slim):
    model, test = slim
    # two channels per layer: both small widths keep one channel, so equal banks give equal sweeps
    arch = ArchConfig("B", (2, 2), 7, (2, 2), (8,) * 3, (8,) * 2, 6)
    m = train_slimmable(instantiate(arch, 0), synth_har(10, 6, seed=0), TrainProtocol(max_epochs=2))
    for bank in m.bns:
        src, dst = bank.get(0.5), bank.get(0.25)
        for f in ("gamma", "beta", "running_mean", "running_var"):
            getattr(dst, f)[...] = getattr(src, f)
    w, sweeps = choose_width(m, test)
    assert w == 0.25
    assert [p.score for p in sweeps[0.25]] == [p.score for p in sweeps[0.5]]


def test_choose_width_rejects_chance_level_quarter(slim):
    model, test = slim
    m = model.copy()
    # squash the quarter-width pre-activations so that path always emits the same class
    for bank in m.bns:
        p = bank.get(0.25)
        p.running_var[...] = 1e8
        p.running_mean[...] = 0.0
        p.beta[...] = 0.0
    small = metrics(run_paths(build_adaptive(m, 0.25), test).small_pred, test.y, 6).balanced_accuracy
    assert small <= 0.25
    w, _ = choose_width(m, test)
    assert w == 0.5


def test_refuses_all_binary_backbone():
    arch = ArchConfig("B", (4, 4), 7, (2, 2), (1,) * 3, (1,) * 2, 6)
    with pytest.raises(ConfigurationError):
        build_adaptive(instantiate(arch), 0.5)


def test_adaptive_model_validation(slim):
    model, _ = slim
    cm = compile_model(model, (0.5, 1.0))
    with pytest.raises(ConfigurationError):
        AdaptiveModel(cm, 0.25)
    with pytest.raises(ConfigurationError):
        AdaptiveModel(cm, 0.75)
    with pytest.raises(DomainError):
        AdaptiveModel(cm, 0.5, threshold=2.0)


def test_empty_dataset(slim):
    model, _ = slim
    empty = WindowedDataset(np.zeros((0, 3, 64)), np.zeros(0, dtype=int), 6)
    with pytest.raises(DataError):
        threshold_sweep(build_adaptive(model, 0.5), empty)
