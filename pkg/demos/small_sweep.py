"""A reduced sweep over all six modes with a claims table and a plot.

Run with ``python demos/small_sweep.py``; outputs go to ``demo_runs/``.
The same thing from the shell:

    fedtraffic sweep --seed 0,1 --epochs 40 --out demo_runs
"""
import dataclasses
from pathlib import Path

from fedtraffic.config import MODES, ScenarioConfig
from fedtraffic.export import export_csv, export_plot
from fedtraffic.harness import compare, sweep

out = Path("demo_runs")
out.mkdir(exist_ok=True)
cfg = dataclasses.replace(ScenarioConfig(), seeds=(0, 1), training_epochs=40)

reports = sweep(cfg, MODES, progress=lambda m, s: print("done", m, "seed", s))
for r in reports:
    r.save(out / f"report_{r.mode}.json")
    export_csv(r, out / f"metrics_{r.mode}.csv")
export_plot(reports, out / "mean_speed.svg")
print(compare(reports, cfg.claims).render())
