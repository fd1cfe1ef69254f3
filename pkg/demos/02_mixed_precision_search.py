"""Differentiable bit-width search across a lambda sweep.

Each extracted network is fine-tuned at its fixed bit-widths.  Small lambdas
keep wide precisions; large ones push every layer towards 1 bit.  Run: python3 demos/02_mixed_precision_search.py
"""
from subbyte_har.data import synth_har
from subbyte_har.model_space import ArchConfig
from subbyte_har.nas import NasConfig, nas_search, sweep_report
from subbyte_har.train import TrainProtocol

train = synth_har(40, 6, seed=0)
base = ArchConfig("B", (8, 16), 7, (2, 2), (8,) * 3, (8,) * 2, 6)
protocol = TrainProtocol(max_epochs=20)
results = nas_search(base, train, protocol, NasConfig([0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2]))
print(sweep_report(results))
for r in results:
    print(f"lambda={r.lam:<8g} w={r.arch.w_bits} a={r.arch.a_bits} weight bits={r.model_bits} holdout bAcc={r.holdout_score:.3f}")
