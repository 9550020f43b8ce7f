# %% [markdown]
# # Does the attacker notice shifts that validation loss misses?
#
# For each shift severity, compare the validation-loss divergence with each SoL
# series' divergence at the first round that can carry the shift. Points above the
# diagonal are shifts the attacker sees more clearly than the loss curve shows them.
# The 50-50 control swaps in fresh data with the original label mix.

# %%
import numpy as np

from shiftleak.experiments import run_experiment
from shiftleak.studies import make_preset

study = make_preset("sensitivity")
repeats = 2  # the preset uses 3; 2 keeps this script to a few minutes

# %%
rows = []
for label, cfg in study.points():
    for k in range(repeats):
        res = run_experiment(cfg, k)
        for pt in res.sensitivity():
            rows.append((label, k, pt.series_id, pt.valloss_z, pt.sol_z))

# %%
print(f"{'point':14s} {'series':30s} {'val z':>7s} {'sol z':>7s}")
for label in dict(study.points()):
    sel = [r for r in rows if r[0] == label]
    for sid in sorted({r[2] for r in sel}):
        v = np.mean([r[3] for r in sel if r[2] == sid])
        s = np.mean([r[4] for r in sel if r[2] == sid])
        if sid.startswith("gradients"):
            print(f"{label:14s} {sid:30s} {v:7.2f} {s:7.2f}")

# %%
above = np.mean([r[4] > r[3] for r in rows])
print(f"fraction of points above the diagonal: {above:.2f}")
