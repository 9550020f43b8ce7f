"""Aggregate a telemetry directory: mean/std tables, scatter summaries and verdicts.

Everything here is a pure function of the files on disk.
"""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from .attacker import SolSeries, normalize_series
from .errors import ConsistencyError
from .telemetry import atomic_write, csv_text, find_runs, read_run

SUMMARY_COLUMNS = ("sweep", "series_id", "round", "quantity", "n", "mean", "std")
SCATTER_SUMMARY_COLUMNS = ("sweep", "series_id", "round", "n", "valloss_divergence_mean",
                           "valloss_divergence_std", "sol_divergence_mean", "sol_divergence_std",
                           "valloss_z_mean", "valloss_z_std", "sol_z_mean", "sol_z_std",
                           "above_diagonal_fraction")
DEFAULT_THRESHOLD = 3.0


def load_study(root) -> dict[str, list]:
    """Runs grouped by sweep label; repeats of a label must share one config."""
    paths = find_runs(root)
    if not paths:
        raise ConsistencyError(f"{root}: no runs found (no manifest.json)")
    groups: dict[str, list] = defaultdict(list)
    for p in paths:
        run = read_run(p)
        groups[run.sweep].append(run)
    for sweep, runs in groups.items():
        keys = {r.config_key() for r in runs}
        if len(keys) > 1:
            raise ConsistencyError(f"sweep {sweep!r}: runs in {root} have different configs")
        reps = [r.repeat for r in runs]
        if len(set(reps)) != len(reps):
            raise ConsistencyError(f"sweep {sweep!r}: repeat index used twice")
        runs.sort(key=lambda r: r.repeat)
    return dict(sorted(groups.items()))


def _stats(xs) -> tuple[int, float, float]:
    a = np.asarray(xs, dtype=np.float64)
    # population std: a single repeat gives 0, not NaN
    return len(a), float(a.mean()), float(a.std())


def summary_rows(groups: dict) -> list[tuple]:
    rows = []
    for sweep, runs in groups.items():
        acc: dict[tuple, list] = defaultdict(list)
        for run in runs:
            for row in run.rounds:
                if row["client"] == "global" and row["metric"] == "val_loss":
                    acc[("val_loss", int(row["round"]), "value")].append(float(row["value"]))
            per_series: dict[str, dict] = defaultdict(dict)
            for row in run.sol:
                sid = f"{row['info_kind']}/{row['metric']}/{row['layer']}"
                acc[(sid, int(row["round"]), "value")].append(float(row["value"]))
                per_series[sid][int(row["round"])] = float(row["value"])
            # each series scaled to [0, 1] within its run, for layer-by-layer comparison
            for sid, series in per_series.items():
                kind, metric, layer = sid.split("/")
                scaled = normalize_series(SolSeries(kind, metric, layer, series))
                for t, v in scaled.series.items():
                    acc[(sid, t, "normalized")].append(v)
            for row in run.divergence:
                acc[(row["series_id"], int(row["round"]), "z")].append(float(row["z_score"]))
        for (sid, t, q) in sorted(acc):
            rows.append((sweep, sid, t, q, *_stats(acc[(sid, t, q)])))
    return rows


def scatter_summary_rows(groups: dict) -> list[tuple]:
    rows = []
    for sweep, runs in groups.items():
        acc: dict[tuple, list] = defaultdict(list)
        for run in runs:
            for row in run.scatter:
                acc[(row["series_id"], int(row["round"]))].append(row)
        for key in sorted(acc):
            pts = acc[key]
            cols = []
            for c in ("valloss_divergence", "sol_divergence", "valloss_z", "sol_z"):
                n, m, s = _stats([float(p[c]) for p in pts])
                cols += [m, s]
            above = np.mean([float(p["sol_z"]) > float(p["valloss_z"]) for p in pts])
            rows.append((sweep, key[0], key[1], len(pts), *cols, float(above)))
    return rows


def verdict(run, threshold: float = DEFAULT_THRESHOLD) -> str:
    """Peak full-model SoL z-score over rounds with a clean trend window (>= e + 2)."""
    cfg = run.manifest["config"]
    start = cfg["e"] + 2
    best = None
    for row in run.divergence:
        sid = row["series_id"]
        if sid == "val_loss" or not sid.endswith("/full"):
            continue
        t, z = int(row["round"]), float(row["z_score"])
        if t < start:
            continue
        if best is None or (z, -t) > (best[0], -best[1]):
            best = (z, t, sid)
    head = f"{run.sweep or 'run'} repeat {run.repeat}: "
    if best is None:
        return head + "no scored rounds"
    z, t, sid = best
    if z >= threshold:
        return head + f"shift detected at round {t} by series {sid} at z={z:.2f}"
    return head + f"no shift detected (peak z={z:.2f} by series {sid} at round {t})"


def report(root, out_dir=None, threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Write summary.csv, scatter_summary.csv and verdicts.txt; return their contents."""
    groups = load_study(root)
    out = Path(out_dir) if out_dir is not None else Path(root) / "report"
    texts = {
        "summary.csv": csv_text(SUMMARY_COLUMNS, summary_rows(groups)),
        "scatter_summary.csv": csv_text(SCATTER_SUMMARY_COLUMNS, scatter_summary_rows(groups)),
        "verdicts.txt": "".join(verdict(r, threshold) + "\n"
                                for runs in groups.values() for r in runs),
    }
    for name, text in texts.items():
        atomic_write(out / name, text)
    return texts
