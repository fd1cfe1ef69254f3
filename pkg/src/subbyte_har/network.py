"""Trainable template network: conv -> BN -> ReLU -> act-quant -> pool, then dense.

Three execution modes share one parameter set:

* ``quantized`` (default): fixed per-tensor bit-widths from the architecture.
  In eval mode BatchNorm is folded and the folded bias is snapped to the
  accumulator grid, so the float forward is exactly what the integer engine
  computes (up to requantization multiplier rounding).
* ``quantized = False``: pure float, ReLU only.
* ``mixed`` (set by :func:`subbyte_har.nas.attach_sites`): every weight and
  activation tensor is a softmax blend of 1/2/4/8-bit branches.
"""

from __future__ import annotations

import copy

import numpy as np

from . import layers as L
from .errors import ConfigurationError, NumericError, StateError
from .model_space import ArchConfig
from .quantize import (
    ActQuantizer,
    WeightQuantizer,
    act_step,
    calibrate_input,
    fake_quant_act,
    fake_quant_act_grad,
    fake_quant_input,
    fake_quant_weight,
    fake_quant_weight_grad,
    round_half_away,
    weight_step,
)

ALPHA_INIT = 8.0
ALPHA_INIT_BINARY = 1.0
ALPHA_MIN = 1e-3


def initial_alpha(bits: int) -> float:
    # a 1-bit clip of 8 would put the sign threshold at 4, far outside BN outputs
    return ALPHA_INIT_BINARY if bits == 1 else ALPHA_INIT


class Network:
    def __init__(self, arch: ArchConfig, seed: int = 0, widths=L.WIDTHS):
        self.arch = arch
        self.widths = tuple(widths)
        self.seed = seed
        self._check_lengths()
        rng = np.random.default_rng(seed)
        self.conv_w, self.conv_b, self.bns = [], [], []
        c_in = arch.in_channels
        for c_out in arch.channels:
            bound = np.sqrt(6.0 / (c_in * arch.kernel))
            self.conv_w.append(rng.uniform(-bound, bound, size=(c_out, c_in, arch.kernel)))
            self.conv_b.append(np.zeros(c_out))
            self.bns.append(L.BatchNormBank(c_out, self.widths))
            c_in = c_out
        fan_in = arch.fc_in_features
        bound = np.sqrt(6.0 / fan_in)
        self.fc_w = rng.uniform(-bound, bound, size=(arch.n_classes, fan_in))
        self.fc_b = np.zeros(arch.n_classes)
        self.alpha_w = np.array([np.abs(w).max() for w in self.conv_w] + [np.abs(self.fc_w).max()])
        self.alpha_a = np.array([initial_alpha(b) for b in arch.a_bits])
        self.input_scale = 1.0
        self.input_zero_point = 0
        self.quantized = True
        self.mixed = None  # set by nas.attach_sites
        self.history = []
        self._caches = None

    def _check_lengths(self):
        length = self.arch.length
        for p in self.arch.pools:
            if p and length < p:
                raise ConfigurationError(
                    f"window length {self.arch.length} too short for pooling {self.arch.pools}")
            if p:
                length //= p
        if length < 1:
            raise ConfigurationError(f"window length {self.arch.length} too short for pooling {self.arch.pools}")

    # -- bookkeeping -----------------------------------------------------------

    def copy(self) -> "Network":
        caches, self._caches = self._caches, None
        try:
            return copy.deepcopy(self)
        finally:
            self._caches = caches

    def calibrate(self, x) -> None:
        self.input_scale, self.input_zero_point = calibrate_input(x)

    def weight_quantizer(self, i: int) -> WeightQuantizer:
        return WeightQuantizer(self.arch.w_bits[i], float(self.alpha_w[i]))

    def act_quantizer(self, i: int) -> ActQuantizer:
        return ActQuantizer(self.arch.a_bits[i], float(self.alpha_a[i]))

    def input_step(self, i: int) -> float:
        """Real value of one integer unit at the input of conv ``i`` (or the dense layer)."""
        if i == 0:
            return self.input_scale
        return act_step(self.arch.a_bits[i - 1], float(self.alpha_a[i - 1]))

    def conv_layer(self, i: int) -> L.Conv1DLayer:
        w = self.conv_w[i]
        return L.Conv1DLayer(w.shape[1], w.shape[0], w.shape[2], w, self.conv_b[i],
                             self.weight_quantizer(i), self.act_quantizer(i))

    def parameters(self) -> dict:
        """Trainable arrays by name; updating them in place updates the model."""
        p = {}
        for i in range(self.arch.n_conv):
            p[f"conv{i}.w"] = self.conv_w[i]
            p[f"conv{i}.b"] = self.conv_b[i]
            for w, bn in self.bns[i].params.items():
                p[f"bn{i}@{w}.gamma"] = bn.gamma
                p[f"bn{i}@{w}.beta"] = bn.beta
        p["fc.w"] = self.fc_w
        p["fc.b"] = self.fc_b
        if self.mixed is None:
            p["alpha_w"] = self.alpha_w
            p["alpha_a"] = self.alpha_a
        else:
            for name, site in self.mixed.items():
                p[f"{name}.logits"] = site.logits
                p[f"{name}.alphas"] = site.alphas
        return p

    def clamp_alphas(self) -> None:
        np.maximum(self.alpha_w, ALPHA_MIN, out=self.alpha_w)
        np.maximum(self.alpha_a, ALPHA_MIN, out=self.alpha_a)
        if self.mixed is not None:
            for site in self.mixed.values():
                np.maximum(site.alphas, ALPHA_MIN, out=site.alphas)

    # -- forward / backward ------------------------------------------------

    def _weights(self, i, w, need_cache):
        """Effective weights for layer ``i`` (``i == n_conv`` is the dense layer)."""
        if self.mixed is not None:
            return self.mixed[f"w{i}"].forward(w)
        if self.quantized:
            return fake_quant_weight(w, self.weight_quantizer(i)), None
        return w, None

    def _weights_backward(self, i, w, g, cache, grads):
        if self.mixed is not None:
            gw, glog, galpha = self.mixed[f"w{i}"].backward(g, cache)
            grads[f"w{i}.logits"] = grads.get(f"w{i}.logits", 0) + glog
            grads[f"w{i}.alphas"] = grads.get(f"w{i}.alphas", 0) + galpha
            return gw
        if self.quantized:
            gw, galpha = fake_quant_weight_grad(w, self.weight_quantizer(i), g)
            grads["alpha_w"][i] += galpha
            return gw
        return g

    def forward(self, x, width: float = 1.0, train: bool = False) -> np.ndarray:
        """Class scores ``[N, n_classes]`` for windows ``x [N, C, L]``."""
        if width not in self.widths:
            raise ConfigurationError(f"width {width} not supported by this model {self.widths}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.arch.in_channels, self.arch.length):
            raise ConfigurationError(
                f"input shape {x.shape[1:]} does not match ({self.arch.in_channels}, {self.arch.length})")
        mode = "train" if train else "eval"
        deploy = self.quantized and self.mixed is None and not train
        caches = []
        a = fake_quant_input(x, self.input_scale, self.input_zero_point) if self.quantized else x
        for i in range(self.arch.n_conv):
            co = L.active_channels(self.arch.channels[i], width)
            w = self.conv_w[i][:co, :a.shape[1]]
            w_eff, wcache = self._weights(i, w, train)
            if deploy:
                z, ccache = L.conv1d(a, w_eff)
                y = self._folded_bn(i, z, width, co)
                bcache = None
            else:
                z, ccache = L.conv1d(a, w_eff, self.conv_b[i][:co])
                y, bcache = L.batchnorm_forward(z, self.bns[i], width, mode)
            r, rmask = L.relu_forward(y)
            if self.mixed is not None:
                q, acache = self.mixed[f"a{i}"].forward(r)
            elif self.quantized:
                q, acache = fake_quant_act(r, self.act_quantizer(i)), r
            else:
                q, acache = r, None
            pool = L.MaxPool1DLayer(self.arch.pools[i] or 2, bool(self.arch.pools[i]))
            a, pcache = L.maxpool_forward(q, pool)
            caches.append((w, wcache, ccache, bcache, rmask, acache, pcache, co))
        n = a.shape[0]
        feats = a.reshape(n, -1)
        nf = feats.shape[1]
        w = self.fc_w[:, :nf]
        w_eff, wcache = self._weights(self.arch.n_conv, w, train)
        if deploy:
            step = weight_step(self.arch.w_bits[-1], float(self.alpha_w[-1])) * self.input_step(self.arch.n_conv)
            scores = feats @ w_eff.T + step * round_half_away(self.fc_b / step)
            fcache = None
        else:
            scores, fcache = L.linear_forward(feats, w_eff, self.fc_b)
        caches.append((w, wcache, fcache, a.shape, nf))
        self._caches = (caches, width) if train else None
        return scores

    def _folded_bn(self, i, z, width, co):
        bn = self.bns[i].get(width)
        scale, shift = L.fold_bn(bn.gamma, bn.beta, bn.running_mean, bn.running_var, self.bns[i].eps)
        bias = scale * self.conv_b[i][:co] + shift
        eff = scale * weight_step(self.arch.w_bits[i], float(self.alpha_w[i])) * self.input_step(i)
        safe = np.where(eff != 0, eff, 1.0)
        qbias = np.where(eff != 0, eff * round_half_away(bias / safe), bias)
        return scale[None, :, None] * z + qbias[None, :, None]

    def backward(self, grad_scores) -> dict:
        """Gradients of a scalar loss given ``dloss/dscores`` from the last
        training-mode :meth:`forward`."""
        if self._caches is None:
            raise StateError("backward requires a preceding forward(..., train=True)")
        caches, width = self._caches
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        w, wcache, fcache, ashape, nf = caches[-1]
        gfeats, gw_eff, gb = L.linear_backward(grad_scores, fcache)
        grads["fc.w"][:, :nf] += self._weights_backward(self.arch.n_conv, w, gw_eff, wcache, grads)
        grads["fc.b"] += gb
        g = gfeats.reshape(ashape)
        for i in reversed(range(self.arch.n_conv)):
            w, wcache, ccache, bcache, rmask, acache, pcache, co = caches[i]
            g = L.maxpool_backward(g, pcache)
            if self.mixed is not None:
                g, glog, galpha = self.mixed[f"a{i}"].backward(g, acache)
                grads[f"a{i}.logits"] += glog
                grads[f"a{i}.alphas"] += galpha
            elif self.quantized:
                g, galpha = fake_quant_act_grad(acache, self.act_quantizer(i), g)
                grads["alpha_a"][i] += galpha
            g = L.relu_backward(g, rmask)
            g, ggamma, gbeta = L.batchnorm_backward(g, bcache)
            grads[f"bn{i}@{width}.gamma"] += ggamma
            grads[f"bn{i}@{width}.beta"] += gbeta
            g, gw_eff, gb = L.conv1d_grads(g, ccache)
            grads[f"conv{i}.b"][:co] += gb
            grads[f"conv{i}.w"][:co, :w.shape[1]] += self._weights_backward(i, w, gw_eff, wcache, grads)
        return grads

    # -- inference helpers ---------------------------------------------------

    def scores(self, x, width: float = 1.0, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.concatenate([self.forward(x[i:i + batch_size], width) for i in range(0, len(x), batch_size)])
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite class scores; the parameters have diverged")
        return out

    def predict(self, x, width: float = 1.0) -> np.ndarray:
        return self.scores(x, width).argmax(axis=1)
