"""Integer-only deployment: compile a trained network, run it, and cost it.

Each conv layer stores packed signed weights plus, per supported width, an
int32 bias in accumulator units and a fixed-point requantization pair
``(multiplier, shift)`` with ``multiplier * 2**-shift ~= M`` to 2**-31
relative.  Per layer the engine unpacks operands, accumulates in 32-bit
integers (XNOR + popcount when both operands are binary), adds the bias,
requantizes with a single round-half-away-from-zero right shift, clamps to
the output grid, max-pools the codes and repacks them.  The dense layer
returns raw int32 scores; ``score_scale`` converts them to real units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CompilationError, DimensionError, NumericError
from .kvfile import read_kv
from .layers import active_channels, fold_bn
from .model_space import ArchConfig
from .quantize import (
    INPUT_BITS,
    PackedBuffer,
    act_int,
    act_levels,
    pack,
    packed_size,
    round_half_away,
    unpack,
    weight_codes,
    weight_step,
)

INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1
MULT_BITS = 31
DEFAULT_THETA = {8: 0.25, 4: 0.375, 2: 0.375, 1: 1.0 / 32}
REQUANT_BYTES_PER_CHANNEL = 8


def load_theta(path) -> dict:
    """Cycle-units-per-MAC table from a ``bits = value`` config file."""
    raw = read_kv(path)
    theta = dict(DEFAULT_THETA)
    for k, v in raw.items():
        theta[int(k)] = float(v)
    return theta


# -- requantization -------------------------------------------------------------

def quantize_multiplier(m_real: float) -> tuple:
    """Return ``(m, shift)`` with ``m * 2**-shift ~= m_real`` and ``|m| < 2**31``."""
    if m_real == 0.0:
        return 0, 0
    if not math.isfinite(m_real):
        raise CompilationError(f"requantization scale {m_real} is not finite")
    frac, exp = math.frexp(abs(m_real))
    m = int(round(frac * (1 << MULT_BITS)))
    if m == 1 << MULT_BITS:
        m //= 2
        exp += 1
    shift = MULT_BITS - exp
    if shift < 0:
        raise CompilationError(f"requantization scale {m_real} overflows a 32-bit multiplier")
    if shift > 62:
        # |acc| < 2**31 so the product rounds to zero
        return 0, 0
    return (m if m_real > 0 else -m), shift


def requantize(acc, multiplier, shift):
    """``round_half_away(acc * multiplier / 2**shift)`` in integer arithmetic."""
    acc = np.asarray(acc, dtype=np.int64)
    multiplier = np.asarray(multiplier, dtype=np.int64)
    shift = np.asarray(shift, dtype=np.int64)
    prod = acc * multiplier
    mag = np.abs(prod)
    half = np.where(shift > 0, np.left_shift(np.int64(1), np.maximum(shift - 1, 0)), 0)
    return np.sign(prod) * ((mag + half) >> shift)


@dataclass(frozen=True)
class RequantBank:
    bias: np.ndarray  # int32 in accumulator units
    multiplier: np.ndarray  # int32
    shift: np.ndarray  # int32, right shift

    def __eq__(self, other):
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("bias", "multiplier", "shift"))


@dataclass
class CompiledLayer:
    kind: str  # "conv" or "fc"
    c_in: int
    c_out: int
    k: int
    pool: int
    w_bits: int
    in_bits: int
    out_bits: int  # 0 for the dense layer (raw scores)
    weights: PackedBuffer
    banks: dict  # width -> RequantBank (dense layer: width 1.0 only, bias used)

    def weight_matrix(self) -> np.ndarray:
        w = unpack(self.weights, signed=True)
        return w.reshape(self.c_out, self.c_in, self.k) if self.kind == "conv" else w.reshape(self.c_out, self.c_in)


@dataclass
class LayerCost:
    name: str
    macs: int
    cycle_units: float
    weight_bytes: int
    requant_bytes: int


@dataclass
class CostReport:
    layers: list = field(default_factory=list)

    @property
    def macs(self) -> int:
        return sum(c.macs for c in self.layers)

    @property
    def cycle_units(self) -> float:
        return float(sum(c.cycle_units for c in self.layers))

    @property
    def memory_bytes(self) -> int:
        return sum(c.weight_bytes + c.requant_bytes for c in self.layers)

    def as_row(self) -> dict:
        return {"memory_bytes": self.memory_bytes, "macs": self.macs, "cycle_units": self.cycle_units}


@dataclass
class CompiledModel:
    arch: ArchConfig
    input_scale: float
    input_zero_point: int
    score_scale: float
    layers: list
    widths: tuple = (1.0,)
    theta: dict = field(default_factory=lambda: dict(DEFAULT_THETA))

    @property
    def cost(self) -> CostReport:
        return cost_report(self)

    def quantize_input(self, x) -> np.ndarray:
        from .quantize import quantize_input
        return quantize_input(x, self.input_scale, self.input_zero_point)


# -- compilation ------------------------------------------------------------------

def _check_acc_range(name, w_int, max_in, bias):
    worst = np.abs(w_int).reshape(w_int.shape[0], -1).sum(axis=1) * max_in + np.abs(bias)
    if np.any(worst > INT32_MAX):
        raise CompilationError(f"{name}: worst-case accumulator exceeds 32 bits")


def _max_input(bits: int, first: bool) -> int:
    if first:
        return act_levels(INPUT_BITS)
    return 1 if bits == 1 else act_levels(bits)


def compile_model(model, widths=(1.0,), theta=None) -> CompiledModel:
    """Lower a fixed-precision trained network to integer form.

    ``widths`` selects which BatchNorm banks are folded into requantization
    banks; weights are shared by every width.
    """
    if model.mixed is not None:
        raise CompilationError("mixed-precision search models must be extracted to fixed bits first")
    if not model.quantized:
        raise CompilationError("float-mode models cannot be compiled")
    arch = model.arch
    widths = tuple(sorted(set(widths)))
    layers = []
    c_prev = arch.in_channels
    in_bits = INPUT_BITS
    for i in range(arch.n_conv):
        w_bits, out_bits = arch.w_bits[i], arch.a_bits[i]
        alpha_w = float(model.alpha_w[i])
        w_int = weight_codes(model.conv_w[i], w_bits, alpha_w)
        s_w = weight_step(w_bits, alpha_w)
        s_in = model.input_step(i)
        alpha_out = float(model.alpha_a[i])
        banks = {}
        for w in widths:
            co = active_channels(arch.channels[i], w)
            ci = c_prev if i == 0 else active_channels(arch.channels[i - 1], w)
            bn = model.bns[i].get(w)
            scale, shift = fold_bn(bn.gamma, bn.beta, bn.running_mean, bn.running_var, model.bns[i].eps)
            bias_real = scale * model.conv_b[i][:co] + shift
            eff = scale * s_w * s_in
            if np.any(eff == 0):
                raise CompilationError(f"conv{i} width {w}: zero effective scale cannot be requantized")
            bias = round_half_away(bias_real / eff)
            if np.any(np.abs(bias) > INT32_MAX):
                raise CompilationError(f"conv{i} width {w}: bias overflows int32")
            mults, shifts = zip(*(quantize_multiplier(float(e * act_levels(out_bits) / alpha_out)) for e in eff))
            _check_acc_range(f"conv{i}", w_int[:co, :ci], _max_input(in_bits, i == 0), bias)
            banks[w] = RequantBank(bias.astype(np.int32), np.array(mults, dtype=np.int32),
                                   np.array(shifts, dtype=np.int32))
        layers.append(CompiledLayer("conv", w_int.shape[1], w_int.shape[0], arch.kernel, arch.pools[i],
                                    w_bits, in_bits, out_bits, pack(w_int, w_bits, signed=True), banks))
        c_prev, in_bits = arch.channels[i], out_bits
    w_bits = arch.w_bits[-1]
    alpha_w = float(model.alpha_w[-1])
    w_int = weight_codes(model.fc_w, w_bits, alpha_w)
    score_scale = weight_step(w_bits, alpha_w) * model.input_step(arch.n_conv)
    bias = round_half_away(model.fc_b / score_scale)
    if np.any(np.abs(bias) > INT32_MAX):
        raise CompilationError("dense bias overflows int32")
    _check_acc_range("fc", w_int, _max_input(in_bits, False), bias)
    zeros = np.zeros(arch.n_classes, dtype=np.int32)
    layers.append(CompiledLayer("fc", w_int.shape[1], w_int.shape[0], 1, 0, w_bits, in_bits, 0,
                                pack(w_int, w_bits, signed=True), {1.0: RequantBank(bias.astype(np.int32), zeros, zeros)}))
    return CompiledModel(arch, float(model.input_scale), int(model.input_zero_point), float(score_scale),
                         layers, widths, dict(DEFAULT_THETA if theta is None else theta))


# -- execution --------------------------------------------------------------------

def _popcount(a) -> np.ndarray:
    return np.bitwise_count(a)


def binary_dot(a: PackedBuffer, b: PackedBuffer, n: int) -> int:
    """``+-1`` dot product of two 1-bit buffers: ``2 * popcount(XNOR) - n``."""
    if a.bits != 1 or b.bits != 1:
        raise DimensionError("binary_dot needs 1-bit buffers")
    if a.count != n or b.count != n:
        raise DimensionError(f"binary_dot length mismatch: {a.count}, {b.count}, n={n}")
    x = np.frombuffer(a.data, dtype=np.uint8)
    y = np.frombuffer(b.data, dtype=np.uint8)
    xnor = ~(x ^ y)
    if n % 8:
        xnor[-1] &= np.uint8((1 << (n % 8)) - 1)
    return int(2 * int(_popcount(xnor).sum()) - n)


def _conv_int(vals, w):
    """Zero-padded integer cross-correlation: ``vals [Ci, L]``, ``w [Co, Ci, K]``."""
    k = w.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(vals, ((0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=1)  # [Ci, L, K]
    return np.einsum("clk,ock->ol", cols, w)


def _conv_xnor(bits_in, w):
    """Binary conv via XNOR + popcount; padded taps are excluded from the count."""
    ci, length = bits_in.shape
    k = w.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(bits_in.astype(np.uint8), ((0, 0), (pad, pad)))
    valid = np.pad(np.ones((ci, length), dtype=np.uint8), ((0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=1).transpose(1, 0, 2).reshape(length, ci * k)
    vcols = sliding_window_view(valid, k, axis=1).transpose(1, 0, 2).reshape(length, ci * k)
    a = np.packbits(cols, axis=1, bitorder="little")
    v = np.packbits(vcols, axis=1, bitorder="little")
    wb = np.packbits((w > 0).astype(np.uint8).reshape(w.shape[0], ci * k), axis=1, bitorder="little")
    xnor = ~(a[None] ^ wb[:, None]) & v[None]
    pc = _popcount(xnor).sum(axis=2, dtype=np.int64)
    n_valid = vcols.sum(axis=1, dtype=np.int64)
    return 2 * pc - n_valid[None]


def _maxpool_codes(codes, s):
    if not s:
        return codes
    co, length = codes.shape
    out = length // s
    return codes[:, :out * s].reshape(co, out, s).max(axis=2)


def _forward_one(cm: CompiledModel, codes, width, trace=None):
    vals = codes.astype(np.int64) - cm.input_zero_point
    bits_in = None
    for li, layer in enumerate(cm.layers[:-1]):
        bank = layer.banks[width]
        co = bank.bias.size
        w = layer.weight_matrix()[:co, :vals.shape[0]]
        if layer.w_bits == 1 and layer.in_bits == 1:
            acc = _conv_xnor(bits_in, w)
        else:
            acc = _conv_int(vals, w)
        acc = acc + bank.bias.astype(np.int64)[:, None]
        if trace is not None:
            trace.append(acc.copy())
        if np.any(acc > INT32_MAX) or np.any(acc < INT32_MIN):
            raise NumericError(f"layer {li}: accumulator overflow")
        q = requantize(acc, bank.multiplier[:, None], bank.shift[:, None])
        out_codes = np.clip(q, 0, act_levels(layer.out_bits))
        out_codes = _maxpool_codes(out_codes, layer.pool)
        buf = pack(out_codes.ravel(), layer.out_bits)
        out_codes = unpack(buf).reshape(out_codes.shape)
        bits_in = out_codes
        vals = act_int(out_codes, layer.out_bits)
    fc = cm.layers[-1]
    feats = vals.ravel()
    w = fc.weight_matrix()[:, :feats.size]
    scores = w @ feats + fc.banks[1.0].bias.astype(np.int64)
    if trace is not None:
        trace.append(scores.copy())
    if np.any(scores > INT32_MAX) or np.any(scores < INT32_MIN):
        raise NumericError("dense accumulator overflow")
    return scores.astype(np.int32)


def integer_forward(cm: CompiledModel, codes, width: float = 1.0) -> np.ndarray:
    """Raw int32 class scores for 8-bit input codes ``[C, L]`` or ``[N, C, L]``."""
    codes = np.asarray(codes)
    single = codes.ndim == 2
    batch = codes[None] if single else codes
    if batch.ndim != 3 or batch.shape[1:] != (cm.arch.in_channels, cm.arch.length):
        raise DimensionError(f"input codes shape {codes.shape} does not match "
                             f"({cm.arch.in_channels}, {cm.arch.length})")
    if width not in cm.widths:
        raise DimensionError(f"width {width} not compiled into this model {cm.widths}")
    if np.any(batch < 0) or np.any(batch > act_levels(INPUT_BITS)):
        raise DimensionError("input codes must be 8-bit unsigned")
    out = np.stack([_forward_one(cm, b, width) for b in batch])
    return out[0] if single else out


def accumulator_trace(cm: CompiledModel, codes, width: float = 1.0) -> list:
    """Per-layer accumulators (bias included, before requantization) for one input."""
    trace = []
    _forward_one(cm, np.asarray(codes), width, trace)
    return trace


# -- cost model -------------------------------------------------------------------

def layer_cost(name, kind, c_in, c_out, k, length, w_bits, in_bits, theta=None, requant_channels=None) -> LayerCost:
    theta = DEFAULT_THETA if theta is None else theta
    macs = c_out * c_in * k * length if kind == "conv" else c_in * c_out
    count = c_out * c_in * (k if kind == "conv" else 1)
    ch = c_out if requant_channels is None else requant_channels
    return LayerCost(name, int(macs), macs * theta[max(w_bits, in_bits)],
                     packed_size(count, w_bits), REQUANT_BYTES_PER_CHANNEL * ch)


def cost_report(cm: CompiledModel, width: float = 1.0) -> CostReport:
    """MACs and cycle units at ``width``; memory covers the whole stored model,
    including one requantization bank per compiled width."""
    report = CostReport()
    if not cm.layers:
        return report
    length = cm.arch.length
    ci = cm.arch.in_channels
    for i, layer in enumerate(cm.layers):
        if layer.kind == "conv":
            co = active_channels(layer.c_out, width)
            cin = ci if i == 0 else active_channels(layer.c_in, width)
            banks = sum(layer.banks[w].bias.size for w in cm.widths)
            c = layer_cost(f"conv{i}", "conv", cin, co, layer.k, length, layer.w_bits, layer.in_bits,
                           cm.theta, banks)
            c.weight_bytes = packed_size(layer.c_out * layer.c_in * layer.k, layer.w_bits)
            if layer.pool:
                length //= layer.pool
        else:
            prev = cm.layers[i - 1]
            nf = active_channels(prev.c_out, width) * length
            c = layer_cost("fc", "fc", nf, layer.c_out, 1, 1, layer.w_bits, layer.in_bits, cm.theta)
            c.weight_bytes = packed_size(layer.c_in * layer.c_out, layer.w_bits)
        report.layers.append(c)
    return report


def arch_memory_bytes(arch: ArchConfig, widths=(1.0,)) -> int:
    """Memory formula from the architecture alone."""
    total, c_in = 0, arch.in_channels
    for i, c in enumerate(arch.channels):
        total += packed_size(c * c_in * arch.kernel, arch.w_bits[i])
        total += REQUANT_BYTES_PER_CHANNEL * sum(active_channels(c, w) for w in widths)
        c_in = c
    total += packed_size(arch.fc_in_features * arch.n_classes, arch.w_bits[-1])
    total += REQUANT_BYTES_PER_CHANNEL * arch.n_classes
    return total
