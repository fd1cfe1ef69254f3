import numpy as np
import pytest

from subbyte_har.data import (
    CsvSchema,
    WindowedDataset,
    class_weights,
    load_csv,
    metrics,
    pareto_front,
    pareto_indices,
    save_csv,
    stratified_split,
    synth_har,
)
from subbyte_har.errors import DataError, DimensionError, FormatError


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(DataError):
        load_csv(p, CsvSchema(3, 4))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv")


def test_two_window_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ds = WindowedDataset(rng.normal(size=(2, 3, 5)), [1, 0], 2)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.x, ds.x) and back.y.tolist() == [1, 0] and back.n_classes == 2


def test_wisdm_shaped_input(tmp_path):
    rng = np.random.default_rng(1)
    rows = [",".join(f"{v:.4f}" for v in rng.normal(size=600)) + f",{i % 6}" for i in range(12)]
    p = tmp_path / "wisdm.csv"
    p.write_text("\n".join(rows) + "\n")
    ds = load_csv(p, CsvSchema(3, 200, 6, rate=20.0))
    assert ds.x.shape == (12, 3, 200) and ds.n_classes == 6
    assert ds.window_seconds == pytest.approx(10.0)


def test_ragged_row_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# subbyte-har-csv v1 channels=1 length=2 classes=2\n0.1,0.2,0\n0.1,1\n")
    with pytest.raises(FormatError, match=":3:"):
        load_csv(p)


def test_unparsable_value(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("0.1,abc,0\n")
    with pytest.raises(FormatError, match=":1:"):
        load_csv(p, CsvSchema(1, 2, 2))


def test_label_out_of_range(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("0.1,0.2,5\n")
    with pytest.raises(DataError):
        load_csv(p, CsvSchema(1, 2, 3))


def test_unsupported_version(tmp_path):
    p = tmp_path / "v9.csv"
    p.write_text("# subbyte-har-csv v9 channels=1 length=1\n0.0,0\n")
    with pytest.raises(FormatError):
        load_csv(p)


def test_dataset_invariants():
    with pytest.raises(DimensionError):
        WindowedDataset(np.zeros((2, 3)), [0, 1], 2)
    with pytest.raises(DataError):
        WindowedDataset(np.zeros((1, 1, 2)), [2], 2)


# -- synthetic data ------------------------------------------------------------

def test_synth_deterministic_and_balanced():
    a, b = synth_har(10, 5, seed=3), synth_har(10, 5, seed=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert np.bincount(a.y).tolist() == [10] * 5
    assert a.x.shape == (50, 3, 64)
    assert not np.array_equal(a.x, synth_har(10, 5, seed=4).x)


def test_synth_easy_fraction():
    ds = synth_har(10, 4, easy_fraction=0.7)
    for c in range(4):
        assert ds.easy[ds.y == c].sum() == 7


def _spectral(ds):
    e = np.abs(np.fft.rfft(ds.x, axis=2)) ** 2
    return np.concatenate([np.log1p(e.reshape(len(ds), -1)), np.ones((len(ds), 1))], axis=1)


def test_easy_data_is_linearly_separable_on_spectral_energy():
    train = synth_har(100, 6, seed=0, easy_fraction=1.0)
    test = synth_har(100, 6, seed=1, easy_fraction=1.0)
    x = _spectral(train)
    w = np.linalg.solve(x.T @ x + 1e-3 * np.eye(x.shape[1]), x.T @ np.eye(6)[train.y])
    acc = np.mean(np.argmax(_spectral(test) @ w, axis=1) == test.y)
    assert acc >= 0.99


def test_synth_bad_args():
    with pytest.raises(DataError):
        synth_har(0, 6)
    with pytest.raises(DataError):
        synth_har(5, 6, easy_fraction=1.5)


# -- splits and weights ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_stratified_split(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, 203)
    keep, hold = stratified_split(labels, 0.25, rng)
    assert sorted(np.concatenate([keep, hold]).tolist()) == list(range(203))
    for c in range(5):
        n_c = np.sum(labels == c)
        assert abs(np.sum(labels[keep] == c) - 0.75 * n_c) <= 1


def test_class_weights():
    assert class_weights([0, 1, 2, 0, 1, 2]).tolist() == [1.0, 1.0, 1.0]
    np.testing.assert_allclose(class_weights([0] * 30 + [1] * 10), [40 / 60, 2.0])
    with pytest.raises(DataError):
        class_weights([0, 0, 2])


def test_class_weights_permutation_equivariant():
    labels = np.array([0] * 5 + [1] * 3 + [2] * 9)
    perm = np.array([2, 0, 1])
    np.testing.assert_allclose(class_weights(perm[labels])[perm], class_weights(labels))


# -- metrics -------------------------------------------------------------------

def test_perfect_predictions():
    m = metrics([0, 1, 2, 1], [0, 1, 2, 1])
    assert (m.accuracy, m.balanced_accuracy, m.macro_f1) == (1.0, 1.0, 1.0)
    assert np.array_equal(m.confusion.counts, np.diag([1, 2, 1]))


def test_balanced_accuracy_and_f1_hand_values():
    # class 0 recall 1.0, class 1 recall 0.5
    m = metrics([0, 0, 0, 1], [0, 0, 1, 1])
    assert m.balanced_accuracy == pytest.approx(0.75)
    # class 1: precision 1.0, recall 0.5
    f1_class1 = 2 * 1.0 * 0.5 / 1.5
    f1_class0 = 2 * (2 / 3) * 1.0 / (2 / 3 + 1.0)
    assert f1_class1 == pytest.approx(2 / 3)
    assert m.macro_f1 == pytest.approx((f1_class0 + f1_class1) / 2)


def test_metrics_length_mismatch():
    with pytest.raises(DimensionError):
        metrics([0, 1], [0])


def test_metrics_properties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        labels = rng.integers(0, 4, 40)
        pred = np.where(rng.random(40) < 0.6, labels, rng.integers(0, 4, 40))
        m = metrics(pred, labels, 4)
        rec = [np.mean(pred[labels == c] == c) for c in range(4) if np.any(labels == c)]
        assert min(rec) - 1e-12 <= m.accuracy <= max(rec) + 1e-12
        assert m.confusion.counts.sum() == 40 and m.confusion.counts.min() >= 0
        # repeating one class leaves per-class recalls and so bAcc unchanged
        extra = labels == labels[0]
        m2 = metrics(np.concatenate([pred, pred[extra]]), np.concatenate([labels, labels[extra]]), 4)
        assert m2.balanced_accuracy == pytest.approx(m.balanced_accuracy)


def test_confusion_csv():
    text = metrics([0, 1, 1], [0, 1, 0]).confusion.to_csv()
    assert text.splitlines() == ["true\\pred,0,1", "0,1,1", "1,0,1"]


# -- Pareto --------------------------------------------------------------------

def test_pareto_examples():
    assert pareto_front([(80, 10), (85, 20), (79, 15)]) == [(80, 10), (85, 20)]
    assert pareto_front([(70, 3)]) == [(70, 3)]
    assert pareto_front([(70, 3), (70, 3), (60, 5)]) == [(70, 3)]


def test_pareto_dedup_keeps_smallest_key():
    assert pareto_indices([0.5, 0.5], [2, 2], keys=["b", "a"]) == [1]


def _brute_force(points):
    keep = []
    for i, (s, c) in enumerate(points):
        dominated = any(s2 >= s and c2 <= c and (s2 > s or c2 < c) for s2, c2 in points)
        if not dominated and (s, c) not in keep:
            keep.append((s, c))
    return sorted(keep)


def test_pareto_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 25))
        # small integer grid so ties and duplicates occur often
        pts = [(int(s), int(c)) for s, c in zip(rng.integers(0, 8, n), rng.integers(0, 8, n))]
        assert sorted(pareto_front(pts)) == _brute_force(pts)


def test_pareto_empty():
    with pytest.raises(DataError):
        pareto_front([])
