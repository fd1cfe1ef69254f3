"""Grid search, Pareto fronts and the adaptive stage through the driver API.

Results land in ./demo_grid (resumable: re-running skips finished jobs).
Run: python3 demos/04_grid_search_pipeline.py
"""
from subbyte_har.data import synth_har
from subbyte_har.model_space import GridSpec
from subbyte_har.search import ExperimentPlan, build_adaptive, cycle_front, front_csv, memory_front, run_grid
from subbyte_har.train import TrainProtocol

train = synth_har(150, 6, seed=0, easy_fraction=0.7)
test = synth_har(100, 6, seed=1)
val = synth_har(150, 6, seed=2)
grids = [GridSpec("B", (8, 16, 32), (7,), (2,), bits) for bits in (8, 4, 2)]
plan = ExperimentPlan(train, test, grids, TrainProtocol(max_epochs=30), out_dir="demo_grid", validation=val)

rows = run_grid(plan)
print(f"{len(rows)} configurations trained\n\nmemory front:")
print(front_csv(memory_front(rows)))
print("cycle front:")
print(front_csv(cycle_front(rows)))

res = build_adaptive(rows, plan)
print(f"backbone {res.backbone_row.channels} at {res.backbone_row.w_bits} bits, small width {res.model.w_small}")
print(f"static full width: bAcc {res.static_score:.4f}, {res.static_cost:.0f} cycle units")
print(f"adaptive at threshold {res.chosen.threshold:.2f}: bAcc {res.chosen.score:.4f}, "
      f"{res.chosen.avg_cost:.0f} cycle units ({1 - res.chosen.avg_cost / res.static_cost:.1%} fewer)")
print(f"model files: adaptive {res.adaptive_file_bytes} B, static {res.static_file_bytes} B")
