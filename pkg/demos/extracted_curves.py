"""Seasonal Q(V) and curtailment(V) curves extracted from the worst-day OPF runs.

Run with ``python demos/extracted_curves.py``.
"""
# %%
import numpy as np

from gridseed.evaluation import RunConfig, Study
from gridseed.profiles import SEASONS

study = Study(RunConfig(case=1))
assignment, curves = study.curves()
buses = [g.bus for g in study.net.dgs]

# %% knots of the node-16 curves per season
k = buses.index(16)
for s in SEASONS:
    cp = curves[s][k]
    print(f"{s}: Q(V) knots")
    for v, y in cp.q_curve.points:
        print(f"   {v:.5f}  {y:+.4f}")
    if cp.warnings:
        print("   notes:", *cp.warnings, sep="\n     ")

# %% where each summer Q curve turns from injection to absorption
v = np.linspace(0.9, 1.12, 2201)
for bus, cp in zip(buses, curves["summer"]):
    y = cp.q_curve(v)
    cross = v[np.argmax(y < 0)] if np.any(y < 0) else float("nan")
    print(f"DG at bus {bus:2d}: absorbs above {cross:.4f} p.u.")
