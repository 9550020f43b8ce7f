"""Per-run telemetry files: CSV tables plus a JSON manifest, written atomically.

Floats are written with ``repr`` so a re-run with the same manifest produces
byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .detect import sensitivity_table
from .errors import ConsistencyError, FormatError, WindowError

ROUNDS_COLUMNS = ("round", "client", "metric", "value")
SOL_COLUMNS = ("round", "info_kind", "metric", "layer", "value")
DIVERGENCE_COLUMNS = ("series_id", "round", "expected", "measured", "divergence",
                      "relative_divergence", "z_score")
SCATTER_COLUMNS = ("series_id", "round", "valloss_divergence", "sol_divergence",
                   "valloss_z", "sol_z")
MANIFEST = "manifest.json"
FILES = ("rounds.csv", "sol.csv", "divergence.csv", "scatter.csv", MANIFEST)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def atomic_write(path, text: str) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- #
# Row builders
# --------------------------------------------------------------------------- #

def rounds_rows(records) -> list[tuple]:
    rows = []
    for rec in records:
        rows.append((rec.round, "global", "val_loss", rec.val_loss))
        rows.append((rec.round, "global", "val_acc", rec.val_acc))
        for c in sorted(rec.client_train_loss):
            rows.append((rec.round, c, "train_loss", rec.client_train_loss[c]))
            if c in rec.client_val_loss:
                rows.append((rec.round, c, "val_loss", rec.client_val_loss[c]))
                rows.append((rec.round, c, "val_acc", rec.client_val_acc[c]))
        for c in rec.swapped:
            rows.append((rec.round, c, "swapped", 1))
    return rows


def _layer_order(layer) -> tuple:
    return (0, -1) if layer == "full" else (1, int(layer))


def sol_rows(series_list) -> list[tuple]:
    ordered = sorted(series_list, key=lambda s: (s.info_kind, s.metric, _layer_order(s.layer)))
    rows = []
    for s in ordered:
        for t in sorted(s.series):
            rows.append((t, s.info_kind, s.metric, s.layer, s.series[t]))
    return sorted(rows, key=lambda r: (r[0], r[1], r[2], _layer_order(r[3])))


def divergence_rows(reports: dict) -> list[tuple]:
    rows = []
    for sid in sorted(reports):
        for rep in reports[sid]:
            rows.append((sid, rep.round, rep.expected, rep.measured, rep.divergence,
                         rep.relative_divergence, rep.z_score))
    return rows


def scatter_rows(result, lag: int = 1) -> list[tuple]:
    """Sensitivity pairs at the detection round; empty if the window does not fit."""
    cfg = result.config
    if cfg.s + lag > cfg.r:
        return []
    try:
        points = sensitivity_table(result.sol(), result.val_loss, cfg.s, cfg.e, lag)
        if cfg.per_layer:
            points += sensitivity_table(result.sol(per_layer=True), result.val_loss, cfg.s, cfg.e, lag)
    except WindowError:
        return []
    return [(p.series_id, p.round, p.valloss_divergence, p.sol_divergence, p.valloss_z, p.sol_z)
            for p in sorted(points, key=lambda p: p.series_id)]


# --------------------------------------------------------------------------- #
# Writing and reading runs
# --------------------------------------------------------------------------- #

def manifest_dict(result, sweep: str = "", preset: str = "") -> dict:
    cfg = result.config
    base = result.base_config or cfg
    return {
        "format": 1,
        "version": __version__,
        "preset": preset,
        "sweep": sweep,
        "repeat": result.repeat,
        "seeds": {"model": cfg.seeds.model, "data": cfg.seeds.data, "order": cfg.seeds.order},
        "config": base.to_dict(),
        "undefined_metrics": [list(u) for u in result.observer.undefined],
    }


def write_run(result, run_dir, sweep: str = "", preset: str = "") -> Path:
    """Write every telemetry file of one run; the manifest goes last."""
    run_dir = Path(run_dir)
    atomic_write(run_dir / "rounds.csv", csv_text(ROUNDS_COLUMNS, rounds_rows(result.records)))
    all_series = list(result.observer.series.values())
    atomic_write(run_dir / "sol.csv", csv_text(SOL_COLUMNS, sol_rows(all_series)))
    atomic_write(run_dir / "divergence.csv",
                 csv_text(DIVERGENCE_COLUMNS, divergence_rows(result.reports)))
    atomic_write(run_dir / "scatter.csv", csv_text(SCATTER_COLUMNS, scatter_rows(result)))
    atomic_write(run_dir / MANIFEST,
                 json.dumps(manifest_dict(result, sweep, preset), indent=2, sort_keys=True) + "\n")
    return run_dir


@dataclass
class RunTelemetry:
    path: Path
    manifest: dict
    rounds: list
    sol: list
    divergence: list
    scatter: list

    @property
    def sweep(self) -> str:
        return self.manifest.get("sweep", "")

    @property
    def repeat(self) -> int:
        return int(self.manifest["repeat"])

    def config_key(self) -> str:
        """Base config echo; repeats of one sweep point must share it exactly."""
        return json.dumps(self.manifest["config"], sort_keys=True)


def read_run(run_dir) -> RunTelemetry:
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{run_dir}: unreadable manifest ({exc})") from None
    missing = [f for f in FILES if not (run_dir / f).exists()]
    if missing:
        raise ConsistencyError(f"{run_dir}: missing {', '.join(missing)}")
    return RunTelemetry(run_dir, manifest, read_csv(run_dir / "rounds.csv"),
                        read_csv(run_dir / "sol.csv"), read_csv(run_dir / "divergence.csv"),
                        read_csv(run_dir / "scatter.csv"))


def find_runs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise ConsistencyError(f"{root}: not a telemetry directory")
    return sorted(p.parent for p in root.rglob(MANIFEST))


def run_dir_name(sweep: str, repeat: int) -> str:
    return f"{sweep or 'run'}/repeat_{repeat}"


def telemetry_bytes(run_dir) -> dict:
    """File name -> bytes for every telemetry file of a run (for determinism checks)."""
    run_dir = Path(run_dir)
    return {f: (run_dir / f).read_bytes() for f in FILES}


def load_manifest_config(run_dir_or_manifest) -> tuple[dict, Optional[int]]:
    p = Path(run_dir_or_manifest)
    if p.is_dir():
        p = p / MANIFEST
    m = json.loads(p.read_text())
    return m["config"], m.get("repeat")
