"""Ablation and openness sweeps over a few seeds, printed as a table.

Run: python3 demos/03_sweeps.py  (takes about a minute)
"""
from bbuda.benchgen import BenchmarkSpec
from bbuda.sweeps import Workbench, mean_scores, run_sweep

bench = Workbench()
seeds = [0, 1, 2]

abl = mean_scores(run_sweep("ablation", {}, seeds, BenchmarkSpec(), bench=bench))
print("ablation (mean H over seeds)")
for name in ("distill-only", "distill+self", "full"):
    print(f"  {name:13s} {abl[(name, 'ours')]:.3f}   SO++ {abl[(name, 'so++')]:.3f}")

opn = mean_scores(run_sweep("openness", {"n_common": [5, 10, 15], "union": 21}, seeds, bench=bench))
print("openness (21 classes in total)")
for c in (5, 10, 15):
    cell = f"common={c}"
    print(f"  {cell:10s} ours {opn[(cell, 'ours')]:.3f}   SO++ {opn[(cell, 'so++')]:.3f}")
