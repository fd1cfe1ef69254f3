"""Fake quantization, bit packing and the integer engine on one small network.

Run: python3 demos/01_quantize_and_pack.py
"""
import numpy as np

from subbyte_har.data import synth_har
from subbyte_har.engine import accumulator_trace, compile_model, cost_report, integer_forward
from subbyte_har.model_space import ArchConfig, instantiate
from subbyte_har.quantize import (
    ActQuantizer,
    WeightQuantizer,
    fake_quant_act,
    fake_quant_weight,
    pack,
    unpack,
)
from subbyte_har.train import TrainProtocol, train_fixed

x = np.linspace(-1.0, 3.0, 9)
print("input            ", np.round(x, 3))
for bits in (8, 4, 2, 1):
    print(f"PACT {bits}-bit a=2.0 ", np.round(fake_quant_act(x, ActQuantizer(bits, 2.0)), 3))
w = np.linspace(-1.2, 1.2, 7)
for bits in (4, 2, 1):
    print(f"weight {bits}-bit a=1 ", np.round(fake_quant_weight(w, WeightQuantizer(bits, 1.0)), 3))

# four 2-bit codes per byte, first element in the low bits
buf = pack([1, 0, 2, 0], 2)
print("\npack([1,0,2,0], 2) ->", buf.data.hex(), " unpack ->", unpack(buf).tolist())
buf = pack([-1, 0, 1, -2], 2, signed=True)
print("signed 2-bit roundtrip:", unpack(buf, signed=True).tolist())

train, test = synth_har(30, 6, seed=0), synth_har(10, 6, seed=1)
arch = ArchConfig("B", (8, 16), 7, (2, 2), (4, 2, 8), (4, 2), 6)
model = train_fixed(instantiate(arch, 0), train, TrainProtocol(max_epochs=10))
cm = compile_model(model)
codes = cm.quantize_input(test.x)
int_pred = np.array([np.argmax(integer_forward(cm, c)) for c in codes])
float_pred = np.argmax(model.scores(test.x), axis=1)
print(f"\nmixed network w={arch.w_bits} a={arch.a_bits}")
print("integer vs float argmax agreement:", np.mean(int_pred == float_pred))
print("test accuracy (integer):", np.mean(int_pred == test.y))
rep = cost_report(cm)
for c in rep.layers:
    print(f"  {c.name:<6} macs={c.macs:>7} weight_bytes={c.weight_bytes:>5} cycle_units={c.cycle_units:>9.1f}")
print("total bytes", rep.memory_bytes, "cycle units", rep.cycle_units)
trace = accumulator_trace(cm, codes[0])
print("per-layer accumulator ranges:", [(int(t.min()), int(t.max())) for t in trace])
