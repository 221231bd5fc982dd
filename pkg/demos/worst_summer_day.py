"""Case 1 worst summer day: the four control methods side by side.

Run with ``python demos/worst_summer_day.py``; takes a few seconds.
"""
# %%
from gridseed.evaluation import RunConfig, Study, render_markdown, run_day_report
from gridseed.power_flow import transformer_loading

cfg = RunConfig(case=1, horizon="worst:summer")
study = Study(cfg)
report = run_day_report(cfg, study)
print(render_markdown(report))

# %% hourly view of the OPF (Method 1) at the end of the feeder
net = study.net
k16 = net.index[16]
g16 = [g.bus for g in net.dgs].index(16)
print("hour  v16_M0   v16_M1   q16_kvar  curt16_kw  trafo_%")
for t, (rec0, sol) in enumerate(zip(study.run_day(0, "summer", "worst"), study.opf_day("summer"))):
    if sol.p_avail.sum() == 0:
        continue
    print(f"{t:4d}  {rec0.v[k16]:.4f}  {sol.v[k16]:.4f}  {1000 * sol.q_g[g16]:8.2f}  "
          f"{1000 * sol.p_curt[g16]:9.2f}  {transformer_loading(sol.pf, net):7.2f}")

# %% losses against curtailment: never compare the two in isolation
for m, r in report.methods.items():
    print(f"Method {m}: losses {r.losses_pct:.3f}%  curtailed {r.p_curt_pct:.2f}%  "
          f"energy {1000 * r.curtailed_energy:.1f} kWh")
