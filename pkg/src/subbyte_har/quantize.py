"""Fake-quantization for training and integer codecs for deployment.

Activations follow a PACT-style unsigned grid ``q * alpha / (2**b - 1)`` on
``[0, alpha]``; 1-bit activations map onto ``{-alpha/2, +alpha/2}``.  Weights
use a symmetric signed grid with step ``alpha_w / 2**(b-1)``; 1-bit weights are
``alpha_w * sign(w)``.  Backward helpers implement the straight-through
estimator, so gradients equal those of the un-rounded clipping surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError, RangeError

SUPPORTED_BITS = (1, 2, 4, 8)
INPUT_BITS = 8


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ConfigurationError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")


@dataclass
class ActQuantizer:
    bits: int
    alpha: float = 8.0

    def __post_init__(self):
        _check_bits(self.bits)
        if not self.alpha > 0:
            raise ConfigurationError(f"activation clip alpha must be positive, got {self.alpha}")


@dataclass
class WeightQuantizer:
    bits: int
    alpha: float = 1.0

    def __post_init__(self):
        _check_bits(self.bits)
        if not self.alpha > 0:
            raise ConfigurationError(f"weight clip alpha must be positive, got {self.alpha}")


# -- activations ------------------------------------------------------------

def act_levels(bits: int) -> int:
    return (1 << bits) - 1


def act_step(bits: int, alpha: float) -> float:
    """Real value of one unit of the signed integer used in the MAC."""
    return alpha / 2.0 if bits == 1 else alpha / act_levels(bits)


def act_codes(x, bits: int, alpha: float) -> np.ndarray:
    """Unsigned activation codes in ``[0, 2**bits - 1]``."""
    n = act_levels(bits)
    xc = np.clip(np.asarray(x, dtype=np.float64), 0.0, alpha)
    return np.clip(round_half_away(xc * (n / alpha)), 0, n).astype(np.int64)


def act_int(codes, bits: int) -> np.ndarray:
    """Map stored codes onto the signed integers entering the MAC."""
    codes = np.asarray(codes, dtype=np.int64)
    return 2 * codes - 1 if bits == 1 else codes


def fake_quant_act(x, q: ActQuantizer) -> np.ndarray:
    codes = act_codes(x, q.bits, q.alpha)
    return act_int(codes, q.bits) * act_step(q.bits, q.alpha)


def fake_quant_act_grad(x, q: ActQuantizer, grad):
    """Return ``(grad_x, grad_alpha)`` for :func:`fake_quant_act`.

    The input gradient passes straight through inside ``(0, alpha)``.  For
    ``bits >= 2`` alpha receives the gradient of saturated entries only
    (PACT); for ``bits == 1`` the output is ``+-alpha/2`` so alpha receives
    ``+-1/2`` per entry.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    inside = (x > 0) & (x < q.alpha)
    gx = grad * inside
    if q.bits == 1:
        sgn = np.where(np.clip(x, 0.0, q.alpha) >= q.alpha / 2.0, 0.5, -0.5)
        galpha = float(np.sum(grad * sgn))
    else:
        galpha = float(np.sum(grad * (x >= q.alpha)))
    return gx, galpha


# -- weights ----------------------------------------------------------------

def weight_step(bits: int, alpha: float) -> float:
    return alpha if bits == 1 else alpha / (1 << (bits - 1))


def weight_range(bits: int) -> tuple[int, int]:
    if bits == 1:
        return -1, 1
    half = 1 << (bits - 1)
    return -half, half - 1


def weight_codes(w, bits: int, alpha: float) -> np.ndarray:
    """Signed integer weights; 1-bit weights are ``+-1`` with ``sign(0) = +1``."""
    w = np.asarray(w, dtype=np.float64)
    if bits == 1:
        return np.where(w >= 0, 1, -1).astype(np.int64)
    lo, hi = weight_range(bits)
    return np.clip(round_half_away(w / weight_step(bits, alpha)), lo, hi).astype(np.int64)


def fake_quant_weight(w, q: WeightQuantizer) -> np.ndarray:
    return weight_codes(w, q.bits, q.alpha) * weight_step(q.bits, q.alpha)


def fake_quant_weight_grad(w, q: WeightQuantizer, grad):
    """Return ``(grad_w, grad_alpha)`` for :func:`fake_quant_weight`."""
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if q.bits == 1:
        gw = grad * (np.abs(w) <= q.alpha)
        galpha = float(np.sum(grad * np.where(w >= 0, 1.0, -1.0)))
        return gw, galpha
    lo_code, hi_code = weight_range(q.bits)
    step = weight_step(q.bits, q.alpha)
    lo, hi = lo_code * step, hi_code * step
    gw = grad * ((w > lo) & (w < hi))
    galpha = float(np.sum(grad * (w <= lo)) * (lo_code / (1 << (q.bits - 1)))
                   + np.sum(grad * (w >= hi)) * (hi_code / (1 << (q.bits - 1))))
    return gw, galpha


# -- first-layer input ------------------------------------------------------

def calibrate_input(x) -> tuple[float, int]:
    """Static 8-bit affine range from the data min/max (zero kept exact)."""
    x = np.asarray(x, dtype=np.float64)
    lo = min(float(x.min()), 0.0)
    hi = max(float(x.max()), 0.0)
    scale = (hi - lo) / act_levels(INPUT_BITS)
    if scale == 0.0:
        scale = 1.0
    zp = int(np.clip(round_half_away(-lo / scale), 0, act_levels(INPUT_BITS)))
    return scale, zp


def quantize_input(x, scale: float, zero_point: int) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / scale) + zero_point
    return np.clip(q, 0, act_levels(INPUT_BITS)).astype(np.int64)


def fake_quant_input(x, scale: float, zero_point: int) -> np.ndarray:
    return (quantize_input(x, scale, zero_point) - zero_point) * scale


# -- bit packing ------------------------------------------------------------

@dataclass(frozen=True)
class PackedBuffer:
    bits: int
    count: int
    data: bytes

    @property
    def nbytes(self) -> int:
        return len(self.data)


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def _to_codes(values: np.ndarray, bits: int, signed: bool) -> np.ndarray:
    if not signed:
        return values
    if bits == 1:
        bad = np.flatnonzero((values != 1) & (values != -1))
        if bad.size:
            raise RangeError(f"value {values[bad[0]]} at index {bad[0]} is not +-1 for 1-bit signed packing")
        return (values > 0).astype(np.int64)
    return values + (1 << (bits - 1))


def pack(values, bits: int, signed: bool = False) -> PackedBuffer:
    """Pack integers little-element-first: element ``i`` sits at bit
    ``(i * bits) % 8`` of byte ``i * bits // 8``.

    Signed values are stored offset by ``2**(bits-1)``; signed 1-bit values
    must be ``+-1`` and are stored as ``1 <=> +1``.
    """
    _check_bits(bits)
    values = np.asarray(values, dtype=np.int64).ravel()
    codes = _to_codes(values, bits, signed)
    bad = np.flatnonzero((codes < 0) | (codes > act_levels(bits)))
    if bad.size:
        i = int(bad[0])
        raise RangeError(f"value {values[i]} at index {i} does not fit {bits}-bit {'signed' if signed else 'unsigned'} storage")
    per = 8 // bits
    n = values.size
    padded = np.zeros(packed_size(n, bits) * per, dtype=np.uint8)
    padded[:n] = codes
    lanes = padded.reshape(-1, per)
    shifts = (np.arange(per) * bits).astype(np.uint8)
    out = np.bitwise_or.reduce(lanes << shifts, axis=1) if per > 1 else lanes[:, 0]
    return PackedBuffer(bits, n, out.astype(np.uint8).tobytes())


def unpack(buf: PackedBuffer, signed: bool = False) -> np.ndarray:
    _check_bits(buf.bits)
    expected = packed_size(buf.count, buf.bits)
    if len(buf.data) != expected:
        raise FormatError(f"packed buffer holds {len(buf.data)} bytes; {buf.count} x {buf.bits}-bit values need {expected}")
    per = 8 // buf.bits
    raw = np.frombuffer(buf.data, dtype=np.uint8)
    shifts = (np.arange(per) * buf.bits).astype(np.uint8)
    lanes = (raw[:, None] >> shifts) & np.uint8(act_levels(buf.bits))
    flat = lanes.reshape(-1).astype(np.int64)
    if np.any(flat[buf.count:]):
        raise FormatError("non-zero padding bits in packed buffer")
    codes = flat[:buf.count]
    if not signed:
        return codes
    if buf.bits == 1:
        return 2 * codes - 1
    return codes - (1 << (buf.bits - 1))
