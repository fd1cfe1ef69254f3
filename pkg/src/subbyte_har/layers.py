"""Float / fake-quantized layer kernels with hand-written backward passes.

Tensors are batched ``[N, C, L]`` float64 arrays.  Every ``*_forward`` returns
``(output, cache)`` and the matching ``*_backward`` consumes that cache.
Width slicing keeps the first ``ceil(C * width)`` channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericError, StateError
from .quantize import ActQuantizer, WeightQuantizer, fake_quant_weight, fake_quant_weight_grad

WIDTHS = (0.25, 0.5, 1.0)


def active_channels(channels: int, width: float) -> int:
    return max(1, math.ceil(channels * width - 1e-9))


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise DimensionError(f"expected [C, L] or [N, C, L] input, got shape {x.shape}")
    return x, False


# -- convolution -------------------------------------------------------------

def conv1d(x, w, b=None):
    """Zero "same"-padded cross-correlation. ``x [N, Ci, L]``, ``w [Co, Ci, K]``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv shapes do not match: input {x.shape}, weights {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if x.shape[2] < 1:
        raise DimensionError("input length must be >= 1")
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2)  # [N, Ci, L, K]
    y = np.tensordot(cols, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if b is not None:
        y = y + np.asarray(b, dtype=np.float64)[None, :, None]
    return np.ascontiguousarray(y), (cols, w, x.shape)


def conv1d_grads(grad_out, cache):
    cols, w, xshape = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    k = w.shape[2]
    length = xshape[2]
    gw = np.tensordot(grad_out, cols, axes=([0, 2], [0, 2]))
    gb = grad_out.sum(axis=(0, 2))
    gcols = np.tensordot(grad_out, w, axes=([1], [0]))  # [N, L, Ci, K]
    gxp = np.zeros((xshape[0], xshape[1], length + k - 1))
    for j in range(k):
        gxp[:, :, j:j + length] += gcols[:, :, :, j].transpose(0, 2, 1)
    pad = (k - 1) // 2
    return gxp[:, :, pad:pad + length], gw, gb


@dataclass
class Conv1DLayer:
    c_in: int
    c_out: int
    k: int
    weights: np.ndarray
    bias: np.ndarray
    w_quant: WeightQuantizer | None = None
    a_quant: ActQuantizer | None = None

    def __post_init__(self):
        if self.k % 2 == 0 or self.c_out < 1:
            raise ConfigurationError(f"invalid conv: k={self.k}, c_out={self.c_out}")
        if self.weights.shape != (self.c_out, self.c_in, self.k) or self.bias.shape != (self.c_out,):
            raise DimensionError("conv parameter shapes inconsistent with c_in/c_out/k")


@dataclass
class ConvCache:
    inner: tuple
    w_slice: np.ndarray
    c_out: int
    c_in: int
    quantized: bool
    squeeze: bool


def conv1d_forward(x, layer: Conv1DLayer, width_frac: float = 1.0, quantize: bool = True):
    """Run ``layer`` on its first ``ceil(c_out * width_frac)`` filters.

    The input may carry fewer channels than ``layer.c_in`` (the active subset
    of the previous layer); only that many input channels of each filter are
    read.
    """
    x, squeeze = _batched(x)
    ci = x.shape[1]
    if ci > layer.c_in:
        raise DimensionError(f"input has {ci} channels, layer accepts at most {layer.c_in}")
    co = active_channels(layer.c_out, width_frac)
    w_slice = layer.weights[:co, :ci]
    quantized = quantize and layer.w_quant is not None
    w_eff = fake_quant_weight(w_slice, layer.w_quant) if quantized else w_slice
    y, inner = conv1d(x, w_eff, layer.bias[:co])
    cache = ConvCache(inner, w_slice, co, ci, quantized, squeeze)
    return (y[0] if squeeze else y), cache


def conv1d_backward(grad_out, cache: ConvCache | None, layer: Conv1DLayer | None = None):
    """Return ``(grad_x, grad_w, grad_b, grad_alpha)``; ``grad_w``/``grad_b``
    have the layer's full shape with zeros outside the active slice."""
    if cache is None:
        raise StateError("conv1d_backward called without a forward cache")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        grad_out = grad_out[None]
    gx, gw_eff, gb = conv1d_grads(grad_out, cache.inner)
    galpha = 0.0
    if cache.quantized:
        gw_eff, galpha = fake_quant_weight_grad(cache.w_slice, layer.w_quant, gw_eff)
    c_out, c_in, k = (layer.c_out, layer.c_in, layer.k) if layer is not None else cache.w_slice.shape
    gw = np.zeros((c_out, c_in, k))
    gw[:cache.c_out, :cache.c_in] = gw_eff
    gbias = np.zeros(c_out)
    gbias[:cache.c_out] = gb
    if cache.squeeze:
        gx = gx[0]
    return gx, gw, gbias, galpha


# -- batch normalisation ------------------------------------------------------

@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class BatchNormBank:
    """Switchable BatchNorm: one private parameter set per supported width."""

    channels: int
    widths: tuple = WIDTHS
    eps: float = 1e-5
    momentum: float = 0.1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for w in self.widths:
            if w not in self.params:
                c = active_channels(self.channels, w)
                self.params[w] = BNParams(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))

    def get(self, width: float) -> BNParams:
        if width not in self.params:
            raise ConfigurationError(f"width {width} not in BatchNorm bank {tuple(self.widths)}")
        return self.params[width]


def batchnorm_forward(x, bank: BatchNormBank, width_frac: float = 1.0, mode: str = "eval"):
    p = bank.get(width_frac)
    x, squeeze = _batched(x)
    if x.shape[1] != p.gamma.size:
        raise DimensionError(f"BatchNorm at width {width_frac} expects {p.gamma.size} channels, got {x.shape[1]}")
    if mode == "train":
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        m = x.shape[0] * x.shape[2]
        unbiased = var * m / (m - 1) if m > 1 else var
        p.running_mean *= 1 - bank.momentum
        p.running_mean += bank.momentum * mean
        p.running_var *= 1 - bank.momentum
        p.running_var += bank.momentum * unbiased
    elif mode == "eval":
        mean, var = p.running_mean, p.running_var
    else:
        raise ConfigurationError(f"unknown BatchNorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + bank.eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = p.gamma[None, :, None] * xhat + p.beta[None, :, None]
    cache = (xhat, inv_std, p.gamma.copy(), mode, width_frac, squeeze)
    return (y[0] if squeeze else y), cache


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    if cache is None:
        raise StateError("batchnorm_backward called without a forward cache")
    xhat, inv_std, gamma, mode, _, squeeze = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g[None]
    ggamma = np.sum(g * xhat, axis=(0, 2))
    gbeta = g.sum(axis=(0, 2))
    gxhat = g * gamma[None, :, None]
    if mode == "train":
        m = g.shape[0] * g.shape[2]
        gx = (inv_std[None, :, None] / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2))[None, :, None]
            - xhat * np.sum(gxhat * xhat, axis=(0, 2))[None, :, None]
        )
    else:
        gx = gxhat * inv_std[None, :, None]
    if squeeze:
        gx = gx[0]
    return gx, ggamma, gbeta


def fold_bn(gamma, beta, mean, var, eps: float = 1e-5):
    """Per-channel ``(scale, bias)`` with ``BN(z) == scale * z + bias``."""
    var = np.asarray(var, dtype=np.float64)
    denom = var + eps
    if np.any(denom <= 0):
        raise NumericError("BatchNorm variance + eps must be positive to fold")
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    return scale, np.asarray(beta, dtype=np.float64) - scale * np.asarray(mean, dtype=np.float64)


# -- pooling / activation / dense ---------------------------------------------

@dataclass
class MaxPool1DLayer:
    s: int = 2
    present: bool = True

    def __post_init__(self):
        if self.present and self.s not in (2, 4):
            raise ConfigurationError(f"pool size must be 2 or 4, got {self.s}")


def maxpool_forward(x, layer: MaxPool1DLayer):
    x, squeeze = _batched(x)
    if not layer.present:
        return (x[0] if squeeze else x), None
    s = layer.s
    n, c, length = x.shape
    out_len = length // s
    if out_len < 1:
        raise DimensionError(f"pool size {s} exceeds input length {length}")
    win = x[:, :, :out_len * s].reshape(n, c, out_len, s)
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    cache = (idx, x.shape, s, squeeze)
    return (y[0] if squeeze else y), cache


def maxpool_backward(grad_out, cache):
    if cache is None:
        return grad_out
    idx, shape, s, squeeze = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g[None]
    n, c, out_len = g.shape
    win = np.zeros((n, c, out_len, s))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=3)
    gx = np.zeros(shape)
    gx[:, :, :out_len * s] = win.reshape(n, c, out_len * s)
    return gx[0] if squeeze else gx


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(grad_out, mask):
    return grad_out * mask


@dataclass
class FCLayer:
    in_features: int
    out_features: int
    weights: np.ndarray
    bias: np.ndarray
    w_quant: WeightQuantizer | None = None


def linear_forward(x, w, b):
    """``x [N, F]`` times ``w [O, F]`` plus ``b``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense layer expects {w.shape[1]} features, got {x.shape[-1]}")
    return x @ w.T + b, (x, w)


def linear_backward(grad_out, cache):
    if cache is None:
        raise StateError("linear_backward called without a forward cache")
    x, w = cache
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)
