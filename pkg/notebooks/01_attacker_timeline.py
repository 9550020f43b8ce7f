# %% [markdown]
# # What the attacker sees, round by round
#
# A two-client federation on synthetic blobs. Client 1 swaps its training set for a
# label-shifted one (80% even classes) at round `s`. Client 0 is the honest-but-curious
# attacker: it strips its own update from each broadcast and tracks how the other
# client's model moves.

# %%
import numpy as np

from shiftleak.data import ShiftSpec
from shiftleak.experiments import run_experiment
from shiftleak.fl import ExperimentConfig

cfg = ExperimentConfig(r=16, s=9, d=3000, n=2, m=1, l=2, shift=ShiftSpec.even_odd(10, 0.8))
res = run_experiment(cfg)

# %% [markdown]
# Weights and representations series start at round 2; gradient series need two
# weight differences and start at round 3. A swap at round `s` changes client 1's
# training in that round, so the first broadcast that carries it is `s + 1`.

# %%
for s in res.sol():
    print(f"{s.series_id:36s} starts at round {int(s.rounds[0])}")

# %%
print("round  val_loss   grad/cos   repr/cmd")
g = res.observer.get("gradients", "cosine").series
r = res.observer.get("representations", "cmd").series
for t in range(cfg.s - 3, cfg.s + 4):
    print(f"{t:5d}  {res.val_loss[t]:.5f}  {g.get(t, np.nan):+.5f}  {r.get(t, np.nan):.5f}")

# %% [markdown]
# Trend divergence: fit a line through the previous `e` values, extrapolate one round
# and divide the gap by the fit's residual scale.

# %%
for sid in ("val_loss", "gradients/cosine/full", "representations/cmd/full", "weights/cosine/full"):
    zs = {rep.round: rep.z_score for rep in res.reports[sid]}
    print(f"{sid:28s}", "  ".join(f"{t}:{zs.get(t, np.nan):6.1f}" for t in range(cfg.s - 1, cfg.s + 3)))
