"""On-disk formats.

Compiled models use a little-endian binary container::

    magic      4s   b"SBH1"
    version    u16  1
    flags      u16  bit 0: adaptive record follows the layers
    digest     32s  raw sha256 of the architecture text
    arch_len   u32, arch text (utf-8 key=value)
    n_widths   u8,  widths f64[n_widths]
    input      f64 scale, i32 zero point
    score      f64 final-layer scale
    theta      f64[4] cycle units per MAC for 1, 2, 4, 8 bits
    n_layers   u16
    per layer:
      kind u8 (0 conv, 1 dense), c_in u16, c_out u16, k u16, pool u8,
      w_bits u8, in_bits u8, out_bits u8,
      weight count u32, byte length u32, packed bytes,
      n_banks u8, per bank: width f64, n u16, bias i32[n], multiplier i32[n], shift i32[n]
    adaptive (flag bit 0): w_small f64, threshold f64, policy units per class f64

Trained (float-parameter) networks are stored as ``.npz`` archives holding the
architecture text, every parameter array, BatchNorm running statistics and
the input calibration; their history goes to a CSV next to them.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .engine import CompiledLayer, CompiledModel, RequantBank
from .errors import FormatError
from .model_space import ArchConfig
from .quantize import PackedBuffer

MAGIC = b"SBH1"
VERSION = 1
FLAG_ADAPTIVE = 1
_THETA_BITS = (1, 2, 4, 8)
_KINDS = ("conv", "fc")


class _Reader:
    def __init__(self, data: bytes):
        self.buf = io.BytesIO(data)

    def take(self, fmt):
        size = struct.calcsize(fmt)
        raw = self.buf.read(size)
        if len(raw) != size:
            raise FormatError("model file truncated")
        return struct.unpack(fmt, raw)

    def one(self, fmt):
        return self.take(fmt)[0]

    def bytes(self, n):
        raw = self.buf.read(n)
        if len(raw) != n:
            raise FormatError("model file truncated")
        return raw

    def array(self, dtype, n):
        return np.frombuffer(self.bytes(n * np.dtype(dtype).itemsize), dtype=dtype).copy()


def compiled_to_bytes(cm: CompiledModel, adaptive=None) -> bytes:
    """``adaptive`` is an optional ``(w_small, threshold, policy_per_class)`` triple."""
    out = io.BytesIO()
    arch_text = cm.arch.to_text().encode()
    out.write(struct.pack("<4sHH", MAGIC, VERSION, FLAG_ADAPTIVE if adaptive else 0))
    out.write(hashlib.sha256(arch_text).digest())
    out.write(struct.pack("<I", len(arch_text)) + arch_text)
    out.write(struct.pack(f"<B{len(cm.widths)}d", len(cm.widths), *cm.widths))
    out.write(struct.pack("<di", cm.input_scale, cm.input_zero_point))
    out.write(struct.pack("<d", cm.score_scale))
    out.write(struct.pack("<4d", *(cm.theta[b] for b in _THETA_BITS)))
    out.write(struct.pack("<H", len(cm.layers)))
    for layer in cm.layers:
        out.write(struct.pack("<BHHHBBBB", _KINDS.index(layer.kind), layer.c_in, layer.c_out, layer.k,
                              layer.pool, layer.w_bits, layer.in_bits, layer.out_bits))
        out.write(struct.pack("<II", layer.weights.count, len(layer.weights.data)) + layer.weights.data)
        out.write(struct.pack("<B", len(layer.banks)))
        for w in sorted(layer.banks):
            bank = layer.banks[w]
            out.write(struct.pack("<dH", w, bank.bias.size))
            for arr in (bank.bias, bank.multiplier, bank.shift):
                out.write(np.asarray(arr, dtype="<i4").tobytes())
    if adaptive:
        out.write(struct.pack("<3d", *adaptive))
    return out.getvalue()


def compiled_from_bytes(data: bytes):
    """Returns ``(CompiledModel, adaptive triple or None)``."""
    r = _Reader(data)
    magic, version, flags = r.take("<4sHH")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a compiled model file")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    digest = r.bytes(32)
    arch_text = r.bytes(r.one("<I"))
    if hashlib.sha256(arch_text).digest() != digest:
        raise FormatError("architecture digest mismatch")
    arch = ArchConfig.from_text(arch_text.decode())
    n_w = r.one("<B")
    widths = tuple(r.take(f"<{n_w}d"))
    scale, zp = r.take("<di")
    score_scale = r.one("<d")
    theta = dict(zip(_THETA_BITS, r.take("<4d")))
    layers = []
    for _ in range(r.one("<H")):
        kind, c_in, c_out, k, pool, w_bits, in_bits, out_bits = r.take("<BHHHBBBB")
        count, nbytes = r.take("<II")
        weights = PackedBuffer(w_bits, count, r.bytes(nbytes))
        banks = {}
        for _ in range(r.one("<B")):
            w, n = r.take("<dH")
            banks[w] = RequantBank(*(r.array("<i4", n).astype(np.int32) for _ in range(3)))
        layers.append(CompiledLayer(_KINDS[kind], c_in, c_out, k, pool, w_bits, in_bits, out_bits, weights, banks))
    adaptive = r.take("<3d") if flags & FLAG_ADAPTIVE else None
    if r.buf.read(1):
        raise FormatError("trailing bytes after model record")
    return CompiledModel(arch, scale, zp, score_scale, layers, widths, theta), adaptive


def save_compiled(cm: CompiledModel, path, adaptive=None) -> int:
    data = compiled_to_bytes(cm, adaptive)
    Path(path).write_bytes(data)
    return len(data)


def load_compiled(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"model file {path} does not exist")
    return compiled_from_bytes(path.read_bytes())


def compiled_to_json(cm: CompiledModel, adaptive=None) -> dict:
    """Lossless JSON-able form (floats keep full precision through ``json``)."""
    return {
        "format": MAGIC.decode(),
        "version": VERSION,
        "arch": cm.arch.to_dict(),
        "arch_digest": cm.arch.digest,
        "widths": list(cm.widths),
        "input_scale": cm.input_scale,
        "input_zero_point": cm.input_zero_point,
        "score_scale": cm.score_scale,
        "theta": {str(b): cm.theta[b] for b in _THETA_BITS},
        "layers": [
            {
                "kind": layer.kind, "c_in": layer.c_in, "c_out": layer.c_out, "k": layer.k,
                "pool": layer.pool, "w_bits": layer.w_bits, "in_bits": layer.in_bits, "out_bits": layer.out_bits,
                "weight_count": layer.weights.count, "weights_hex": layer.weights.data.hex(),
                "banks": [{"width": w, "bias": layer.banks[w].bias.tolist(),
                           "multiplier": layer.banks[w].multiplier.tolist(),
                           "shift": layer.banks[w].shift.tolist()} for w in sorted(layer.banks)],
            }
            for layer in cm.layers
        ],
        "adaptive": None if adaptive is None else dict(zip(("w_small", "threshold", "policy_per_class"), adaptive)),
    }


def compiled_from_json(doc: dict):
    try:
        arch = ArchConfig.from_dict(doc["arch"])
        layers = []
        for d in doc["layers"]:
            banks = {float(b["width"]): RequantBank(*(np.array(b[f], dtype=np.int32)
                                                      for f in ("bias", "multiplier", "shift")))
                     for b in d["banks"]}
            layers.append(CompiledLayer(d["kind"], d["c_in"], d["c_out"], d["k"], d["pool"], d["w_bits"],
                                        d["in_bits"], d["out_bits"],
                                        PackedBuffer(d["w_bits"], d["weight_count"], bytes.fromhex(d["weights_hex"])),
                                        banks))
        cm = CompiledModel(arch, float(doc["input_scale"]), int(doc["input_zero_point"]),
                           float(doc["score_scale"]), layers, tuple(doc["widths"]),
                           {int(b): float(v) for b, v in doc["theta"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model JSON: {exc}") from None
    ad = doc.get("adaptive")
    adaptive = None if ad is None else (ad["w_small"], ad["threshold"], ad["policy_per_class"])
    return cm, adaptive


def dump_json(path) -> str:
    cm, adaptive = load_compiled(path)
    return json.dumps(compiled_to_json(cm, adaptive), indent=1)


# -- trained networks ------------------------------------------------------------

def save_network(model, path) -> None:
    from .train import history_csv
    if model.mixed is not None:
        raise FormatError("search-time mixed models are not persisted; extract fixed bits first")
    arrays = {f"p:{k}": v for k, v in model.parameters().items()}
    for i, bank in enumerate(model.bns):
        for w, bn in bank.params.items():
            arrays[f"bn:{i}@{w!r}:mean"] = bn.running_mean
            arrays[f"bn:{i}@{w!r}:var"] = bn.running_var
    meta = {"arch": model.arch.to_text(), "widths": list(model.widths), "seed": model.seed,
            "input_scale": model.input_scale, "input_zero_point": model.input_zero_point,
            "quantized": model.quantized, "history": model.history}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    with path.open("wb") as f:
        np.savez(f, **arrays)
    if model.history:
        path.with_suffix(".history.csv").write_text(history_csv(model.history))


def load_network(path):
    from .network import Network
    path = Path(path)
    if not path.exists():
        raise FormatError(f"model file {path} does not exist")
    try:
        z = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(z["meta"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: not a trained model archive ({exc})") from None
    model = Network(ArchConfig.from_text(meta["arch"]), meta["seed"], tuple(meta["widths"]))
    params = model.parameters()
    for name, arr in params.items():
        key = f"p:{name}"
        if key not in z or z[key].shape != arr.shape:
            raise FormatError(f"{path}: parameter {name} missing or mis-shaped")
        arr[...] = z[key]
    for i, bank in enumerate(model.bns):
        for w, bn in bank.params.items():
            bn.running_mean[...] = z[f"bn:{i}@{w!r}:mean"]
            bn.running_var[...] = z[f"bn:{i}@{w!r}:var"]
    model.input_scale = float(meta["input_scale"])
    model.input_zero_point = int(meta["input_zero_point"])
    model.quantized = bool(meta["quantized"])
    model.history = meta["history"]
    return model
