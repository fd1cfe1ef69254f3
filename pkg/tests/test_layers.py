import numpy as np
import pytest

from fd import central_diff, rel_err
from subbyte_har import layers as L
from subbyte_har.errors import ConfigurationError, DimensionError, NumericError, StateError


def _conv(w, b=None, c_in=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return L.Conv1DLayer(w.shape[1], w.shape[0], w.shape[2], w, b)


def test_conv_hand_example():
    y, _ = L.conv1d_forward(np.array([[1.0, 2, 3, 4]]), _conv([[[1.0, 1, 1]]]), quantize=False)
    assert y.tolist() == [[3, 6, 9, 7]]


def test_conv_zero_weights_gives_bias():
    y, _ = L.conv1d_forward(np.random.default_rng(0).normal(size=(2, 5)), _conv(np.zeros((3, 2, 3)), [1, 2, 3]))
    assert np.array_equal(y, np.repeat([[1.0], [2.0], [3.0]], 5, axis=1))


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(1, 9))
    y, _ = L.conv1d_forward(x, _conv([[[0.0, 1, 0]]]), quantize=False)
    assert np.array_equal(y, x)


def test_conv_single_element_backward():
    layer = _conv([[[2.0]]])
    _, cache = L.conv1d_forward(np.array([[3.0]]), layer, quantize=False)
    gx, gw, gb, _ = L.conv1d_backward(np.array([[1.0]]), cache, layer)
    assert gx.item() == 2.0 and gw.item() == 3.0 and gb.item() == 1.0


def test_conv_zero_grad():
    rng = np.random.default_rng(2)
    layer = _conv(rng.normal(size=(3, 2, 5)))
    _, cache = L.conv1d_forward(rng.normal(size=(4, 2, 8)), layer, quantize=False)
    gx, gw, gb, _ = L.conv1d_backward(np.zeros((4, 3, 8)), cache, layer)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_requires_cache():
    with pytest.raises(StateError):
        L.conv1d_backward(np.zeros((1, 1)), None)


def test_conv_shape_mismatch():
    with pytest.raises(DimensionError):
        L.conv1d_forward(np.zeros((5, 8)), _conv(np.zeros((2, 3, 3))))


@pytest.mark.parametrize("seed", range(3))
def test_conv_backward_matches_fd(seed):
    rng = np.random.default_rng(seed)
    ci, co, k, n, length = rng.integers(1, 4), rng.integers(1, 4), [1, 3, 5][seed], 2, int(rng.integers(3, 9))
    x = rng.normal(size=(n, ci, length))
    w = rng.normal(size=(co, ci, k))
    b = rng.normal(size=co)
    g = rng.normal(size=(n, co, length))
    loss = lambda: float(np.sum(g * L.conv1d(x, w, b)[0]))  # noqa: E731
    _, cache = L.conv1d(x, w, b)
    gx, gw, gb = L.conv1d_grads(g, cache)
    assert rel_err(gx, central_diff(loss, x)) < 1e-4
    assert rel_err(gw, central_diff(loss, w)) < 1e-4
    assert rel_err(gb, central_diff(loss, b)) < 1e-4


def test_linear_backward_matches_fd():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6)), rng.normal(size=3)
    g = rng.normal(size=(4, 3))
    loss = lambda: float(np.sum(g * L.linear_forward(x, w, b)[0]))  # noqa: E731
    gx, gw, gb = L.linear_backward(g, L.linear_forward(x, w, b)[1])
    for got, arr in ((gx, x), (gw, w), (gb, b)):
        assert rel_err(got, central_diff(loss, arr)) < 1e-4


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_backward_matches_fd(mode):
    rng = np.random.default_rng(7)
    bank = L.BatchNormBank(3, (1.0,))
    p = bank.get(1.0)
    p.gamma[...] = rng.uniform(0.5, 1.5, 3)
    p.beta[...] = rng.normal(size=3)
    p.running_mean[...] = rng.normal(size=3)
    p.running_var[...] = rng.uniform(0.5, 2, 3)
    x = rng.normal(size=(4, 3, 5))
    g = rng.normal(size=(4, 3, 5))
    saved = (p.running_mean.copy(), p.running_var.copy())

    def loss():
        y, _ = L.batchnorm_forward(x, bank, 1.0, mode)
        p.running_mean[...], p.running_var[...] = saved
        return float(np.sum(g * y))

    _, cache = L.batchnorm_forward(x, bank, 1.0, mode)
    p.running_mean[...], p.running_var[...] = saved
    gx, ggamma, gbeta = L.batchnorm_backward(g, cache)
    assert rel_err(gx, central_diff(loss, x)) < 1e-4
    assert rel_err(ggamma, central_diff(loss, p.gamma)) < 1e-4
    assert rel_err(gbeta, central_diff(loss, p.beta)) < 1e-4


def test_batchnorm_identity_eval():
    bank = L.BatchNormBank(2)
    x = np.random.default_rng(0).normal(size=(3, 2, 4))
    y, _ = L.batchnorm_forward(x, bank, 1.0, "eval")
    np.testing.assert_allclose(y, x / np.sqrt(1 + bank.eps), rtol=1e-15)


def test_batchnorm_constant_input_train():
    bank = L.BatchNormBank(2, (1.0,))
    bank.get(1.0).beta[...] = [0.5, -1.0]
    y, _ = L.batchnorm_forward(np.full((2, 2, 3), 4.0), bank, 1.0, "train")
    assert np.allclose(y[:, 0], 0.5) and np.allclose(y[:, 1], -1.0)


def test_batchnorm_updates_selected_width_only():
    bank = L.BatchNormBank(8)
    L.batchnorm_forward(np.random.default_rng(0).normal(3, 1, (4, 4, 6)), bank, 0.5, "train")
    assert np.all(bank.get(0.5).running_mean != 0)
    assert not bank.get(1.0).running_mean.any() and not bank.get(0.25).running_mean.any()


def test_batchnorm_unknown_width():
    with pytest.raises(ConfigurationError):
        L.batchnorm_forward(np.zeros((1, 2, 2)), L.BatchNormBank(2, (1.0,)), 0.5)


def test_fold_bn_examples():
    s, b = L.fold_bn(1.0, 0.0, 0.0, 1.0, eps=0.0)
    assert s == 1.0 and b == 0.0
    s, b = L.fold_bn(2.0, 1.0, 3.0, 4.0, eps=0.0)
    assert s == 1.0 and b == -2.0
    with pytest.raises(NumericError):
        L.fold_bn(1.0, 0.0, 0.0, -1.0, eps=0.0)


def test_fold_bn_matches_unfolded():
    rng = np.random.default_rng(3)
    w, b = rng.normal(size=(4, 2, 5)), rng.normal(size=4)
    bank = L.BatchNormBank(4, (1.0,))
    p = bank.get(1.0)
    p.gamma[...], p.beta[...] = rng.uniform(0.5, 2, 4), rng.normal(size=4)
    p.running_mean[...], p.running_var[...] = rng.normal(size=4), rng.uniform(0.2, 3, 4)
    x = rng.normal(size=(3, 2, 9))
    ref, _ = L.batchnorm_forward(L.conv1d(x, w, b)[0], bank, 1.0, "eval")
    scale, shift = L.fold_bn(p.gamma, p.beta, p.running_mean, p.running_var, bank.eps)
    folded = L.conv1d(x, w * scale[:, None, None], scale * b + shift)[0]
    assert np.max(np.abs(folded - ref)) < 1e-10


def test_maxpool_examples():
    y, _ = L.maxpool_forward(np.array([[3.0, 6, 9, 7]]), L.MaxPool1DLayer(2))
    assert y.tolist() == [[6, 9]]
    y, _ = L.maxpool_forward(np.full((2, 9), 1.5), L.MaxPool1DLayer(4))
    assert y.shape == (2, 2) and np.all(y == 1.5)
    x = np.random.default_rng(0).normal(size=(2, 5))
    y, cache = L.maxpool_forward(x, L.MaxPool1DLayer(2, present=False))
    assert y is x or np.array_equal(y, x)
    with pytest.raises(ConfigurationError):
        L.MaxPool1DLayer(3)


def test_maxpool_properties():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 12))
    layer = L.MaxPool1DLayer(2)
    perm = rng.permutation(5)
    assert np.array_equal(L.maxpool_forward(x[perm], layer)[0], L.maxpool_forward(x, layer)[0][perm])
    bigger = x + rng.uniform(0, 1, x.shape)
    assert np.all(L.maxpool_forward(bigger, layer)[0] >= L.maxpool_forward(x, layer)[0])


def test_maxpool_backward_matches_fd():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 9))
    g = rng.normal(size=(2, 3, 4))
    layer = L.MaxPool1DLayer(2)
    loss = lambda: float(np.sum(g * L.maxpool_forward(x, layer)[0]))  # noqa: E731
    assert rel_err(L.maxpool_backward(g, L.maxpool_forward(x, layer)[1]), central_diff(loss, x)) < 1e-4


@pytest.mark.parametrize("width", [0.25, 0.5])
def test_width_slicing_equivalence(width):
    rng = np.random.default_rng(11)
    layer = _conv(rng.normal(size=(8, 6, 3)), rng.normal(size=8))
    ci_active = L.active_channels(6, width)
    x = rng.normal(size=(2, ci_active, 7))
    y, _ = L.conv1d_forward(x, layer, width, quantize=False)
    # full width with inactive inputs zeroed, inactive outputs removed
    x_full = np.zeros((2, 6, 7))
    x_full[:, :ci_active] = x
    full, _ = L.conv1d_forward(x_full, layer, 1.0, quantize=False)
    co = L.active_channels(8, width)
    assert y.shape[1] == co
    np.testing.assert_array_equal(y, full[:, :co])


def test_active_channels():
    assert [L.active_channels(c, w) for c, w in ((8, 0.25), (2, 0.25), (6, 0.5), (5, 0.5))] == [2, 1, 3, 3]
