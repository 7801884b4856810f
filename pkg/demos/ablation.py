"""Train every ablation variant for a few steps from one seed and compare.

Run:  python demos/ablation.py [work_dir] [steps]

The variants differ in distance function, feature layers, loss
composition or network blocks, so their losses part ways from step 1.
"""

import sys
from pathlib import Path

from ivfuse.synthetic import make_synthetic_dataset
from ivfuse.trainer import ABLATIONS, TrainConfig, run_ablation

work = Path(sys.argv[1] if len(sys.argv) > 1 else "ivfuse_ablation")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 5

manifest = make_synthetic_dataset(work / "data", n_pairs=16, size=64, seed=0)
cfg = TrainConfig(steps=steps, patch_size=32, seed=0, checkpoint_every=0)
rows = run_ablation(cfg, list(ABLATIONS), manifest, work / "runs")

print(f"{'variant':8s} {'status':7s} {'first L_total':>14s} {'final L_total':>14s}")
for r in rows:
    first = r["first_L_total"]
    final = r["final_L_total"]
    fmt = (lambda v: f"{float(v):14.4f}" if v not in (None, "") else f"{'-':>14s}")
    print(f"{r['variant']:8s} {r['status']:7s} {fmt(first)} {fmt(final)}")
print("summary written to", work / "runs" / "summary.csv")
