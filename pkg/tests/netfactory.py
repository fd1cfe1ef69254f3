"""Randomised small networks with non-trivial BatchNorm state and clip values."""

import numpy as np

from subbyte_har.layers import active_channels
from subbyte_har.model_space import ArchConfig
from subbyte_har.network import Network
from subbyte_har.quantize import SUPPORTED_BITS

BIT_PAIRS = [(w, a) for w in SUPPORTED_BITS for a in SUPPORTED_BITS]


def random_arch(rng, w_bits, a_bits, n_classes=4, length=16):
    chans = tuple(int(c) for c in rng.choice([2, 4, 8], size=2))
    pools = tuple(int(p) for p in rng.choice([0, 2, 4], size=2))
    if isinstance(w_bits, int):
        w_bits = (w_bits,) * 3
    if isinstance(a_bits, int):
        a_bits = (a_bits,) * 2
    return ArchConfig("B", chans, 7, pools, w_bits, a_bits, n_classes, 2, length)


def randomize(model: Network, rng) -> Network:
    """Random BN banks, biases and clip values so every code level gets used."""
    for i, bank in enumerate(model.bns):
        model.conv_b[i][...] = rng.normal(0, 0.3, model.conv_b[i].shape)
        for bn in bank.params.values():
            c = bn.gamma.size
            bn.gamma[...] = rng.uniform(0.5, 1.5, c)
            bn.beta[...] = rng.uniform(-0.3, 0.6, c)
            bn.running_mean[...] = rng.uniform(-0.5, 0.5, c)
            bn.running_var[...] = rng.uniform(0.5, 2.0, c)
    model.fc_b[...] = rng.normal(0, 0.3, model.fc_b.shape)
    for i, b in enumerate(model.arch.a_bits):
        model.alpha_a[i] = rng.uniform(0.5, 2.0) if b == 1 else rng.uniform(1.0, 4.0)
    model.alpha_w *= rng.uniform(0.6, 1.0, model.alpha_w.shape)
    return model


def random_network(rng, w_bits, a_bits, seed=0, **kw):
    model = randomize(Network(random_arch(rng, w_bits, a_bits, **kw), seed), rng)
    x = rng.normal(0, 1, (64, model.arch.in_channels, model.arch.length))
    model.calibrate(x)
    return model


def masked_full(m: Network, w: float) -> Network:
    """Full-width copy with inactive channels' weights zeroed and the width-``w``
    BN parameters copied into the full-width bank."""
    full = m.copy()
    n_prev = m.arch.in_channels
    for i, c in enumerate(m.arch.channels):
        co = active_channels(c, w)
        full.conv_w[i][co:] = 0.0
        if i:
            full.conv_w[i][:, n_prev:] = 0.0
        src, dst = m.bns[i].get(w), full.bns[i].get(1.0)
        for f in ("gamma", "beta", "running_mean", "running_var"):
            getattr(dst, f)[:co] = getattr(src, f)
        n_prev = co
    mask = np.zeros((m.arch.channels[-1], m.arch.lengths()[-1]))
    mask[:n_prev] = 1
    full.fc_w *= mask.reshape(1, -1)
    return full
