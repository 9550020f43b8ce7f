# %% [markdown]
# # Signal dilution with more clients
#
# The attacker sees the average of everyone else. One client's shift is a smaller part
# of that average when the federation grows, so the shift-round z-score of the
# gradient cosine series should shrink with `n`. At `n = 10` three clients shift.

# %%
import numpy as np

from shiftleak.experiments import run_experiment
from shiftleak.studies import make_preset

study = make_preset("scalability")
series = "gradients/cosine/full"

# %%
for label, cfg in study.points():
    zs = [run_experiment(cfg, k).z(series, cfg.s + 1) for k in range(study.repeats)]
    print(f"n={cfg.n:2d} m={cfg.m} d={cfg.d:5d}  z at s+1: "
          + ", ".join(f"{z:6.1f}" for z in zs) + f"   mean {np.mean(zs):6.1f}")
