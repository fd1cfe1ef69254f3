"""Big/little inference with one slimmable backbone.

A quarter- or half-width slice classifies first; inputs whose top-two
probability margin is at or below the threshold are re-run at full width.
Run: python3 demos/03_adaptive_inference.py
"""
from subbyte_har.adaptive import build_adaptive, choose_width, pick_threshold, run_paths, threshold_sweep
from subbyte_har.data import synth_har
from subbyte_har.model_space import ArchConfig, instantiate
from subbyte_har.train import TrainProtocol, train_slimmable

train = synth_har(200, 6, seed=0, easy_fraction=0.7)
val = synth_har(200, 6, seed=2)
test = synth_har(200, 6, seed=1)
arch = ArchConfig("B", (16, 32), 7, (2, 2), (8,) * 3, (8,) * 2, 6)
model = train_slimmable(instantiate(arch, 0), train, TrainProtocol(max_epochs=30))

w_small, sweeps = choose_width(model, val)
print("small width chosen on validation data:", w_small)
am = build_adaptive(model, w_small)
am.threshold = pick_threshold(sweeps[w_small], sweeps[w_small][-1].score).threshold
print(f"threshold {am.threshold:.2f}  c_small={am.c_small:.0f}  c_big={am.c_big:.0f}  c_policy={am.c_policy:.0f}")

paths = run_paths(am, test)
print("\nthreshold  bAcc    p_e    avg cost")
for p in threshold_sweep(am, test, sorted({0.0, 0.1, 0.2, 0.3, 0.5, am.threshold, 1.0}), paths=paths):
    print(f"{p.threshold:9.2f}  {p.score:.4f}  {p.p_e:.3f}  {p.avg_cost:9.1f}")
