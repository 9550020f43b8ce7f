"""Study presets (centralized, layerwise, sensitivity, scalability, custom) and the sweep runner."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .data import ShiftSpec
from .errors import ConfigError
from .experiments import run_experiment
from .fl import DatasetConfig, ExperimentConfig, Seeds, merge_dicts
from .telemetry import run_dir_name, write_run

logger = logging.getLogger(__name__)

PRESET_NAMES = ("centralized", "layerwise", "sensitivity", "scalability", "custom")
SEVERITIES = (0.55, 0.6, 0.7, 0.8)
SCALABILITY = ((2, 6700, 1), (3, 4400, 1), (5, 2600, 1), (10, 1300, 3))  # (n, d, m)

MNIST_FILES = ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz")
# md5 of the published training archives, for users checking their downloads
CHECKSUMS = {
    "mnist": {"train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
              "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432"},
    "fashion_mnist": {"train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
                      "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe"},
}


@dataclass
class StudyPreset:
    """A base config, a list of labelled override sets and a repeat count."""
    name: str
    base: ExperimentConfig
    sweep: list = field(default_factory=lambda: [("run", {})])  # (label, overrides)
    repeats: int = 3
    only_repeat: Optional[int] = None  # reproduce a single repeat (manifest re-runs)

    def points(self) -> list[tuple[str, ExperimentConfig]]:
        """Every sweep point as a checked config; violations name the point."""
        if self.repeats < 1:
            raise ConfigError("repeats: must be >= 1")
        labels = [label for label, _ in self.sweep]
        if len(set(labels)) != len(labels):
            raise ConfigError("sweep: labels must be unique")
        out, problems = [], []
        # a lone unnamed point reports bare field names
        tag = (lambda label: "") if labels == ["run"] else (lambda label: f"{label}: ")
        for label, over in self.sweep:
            try:
                cfg = self.base.with_overrides(over)
            except ConfigError as exc:
                problems += [tag(label) + v for v in exc.violations]
                continue
            problems += [tag(label) + v for v in cfg.violations()]
            out.append((label, cfg))
        if problems:
            raise ConfigError(problems)
        return out

    def violations(self) -> list[str]:
        try:
            self.points()
        except ConfigError as exc:
            return list(exc.violations)
        return []

    def to_dict(self) -> dict:
        return {"name": self.name, "base": self.base.to_dict(), "repeats": self.repeats,
                "sweep": [{"label": lab, "overrides": over} for lab, over in self.sweep]}

    @classmethod
    def from_dict(cls, d: dict) -> "StudyPreset":
        unknown = set(d) - {"name", "base", "sweep", "repeats"}
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in sorted(unknown)])
        base = ExperimentConfig.from_dict(d.get("base", {}))
        sweep = [(p["label"], p.get("overrides", {})) for p in d.get("sweep", [{"label": "run"}])]
        return cls(d.get("name", "custom"), base, sweep, int(d.get("repeats", 3)))


def study_from_config(d: dict) -> StudyPreset:
    """A config file holds either a full study (has ``base``) or a single ExperimentConfig."""
    if "base" in d:
        return StudyPreset.from_dict(d)
    if "config" in d and "repeat" in d:  # a run manifest: reproduce that one run
        base = ExperimentConfig.from_dict(d["config"])
        return StudyPreset(d.get("preset") or "custom", base, [(d.get("sweep") or "run", {})],
                           repeats=int(d["repeat"]) + 1, only_repeat=int(d["repeat"]))
    return StudyPreset("custom", ExperimentConfig.from_dict(d), [("run", {})], repeats=1)


def dataset_config(kind: str, data_dir: Optional[str] = None) -> DatasetConfig:
    if kind == "synthetic":
        return DatasetConfig()
    root = Path(data_dir or ".")
    if kind in ("mnist", "fashion_mnist"):
        return DatasetConfig(kind=kind, images=str(root / MNIST_FILES[0]),
                             labels=str(root / MNIST_FILES[1]))
    if kind == "census":
        return DatasetConfig(kind="census", csv=str(root / "adult.csv"), num_classes=2)
    raise ConfigError(f"dataset: unknown dataset {kind!r}")


def default_shift(kind: str, num_classes: int, ratio: float) -> ShiftSpec:
    """Even/odd classes; for the binary census label group a is ``>50K`` (class 1)."""
    if kind == "census":
        return ShiftSpec(frozenset({1}), frozenset({0}), ratio)
    return ShiftSpec.even_odd(num_classes, ratio)


def _label(ratio: float) -> str:
    a = int(round(ratio * 100))
    return f"{a}-{100 - a}"


def make_preset(name: str, dataset: str = "synthetic", data_dir: Optional[str] = None,
                seed: Optional[int] = None) -> StudyPreset:
    """Build one of the named studies. Desk-scale defaults: synthetic blobs and the tabular net."""
    if name not in PRESET_NAMES:
        raise ConfigError(f"preset: unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    ds = dataset_config(dataset, data_dir)
    arch = "image" if dataset in ("mnist", "fashion_mnist") else "tabular"
    shift = lambda x: default_shift(dataset, ds.num_classes, x)  # noqa: E731
    # census odds are scaled from the unbalanced base rate instead of forced
    base = ExperimentConfig(dataset=ds, architecture=arch, shift=shift(0.8),
                            relative_shift=dataset == "census")
    if seed is not None:
        base = replace(base, seeds=Seeds(seed, seed, seed))

    if name == "centralized":
        base = replace(base, mode="centralized", n=1, m=0, l=1)
        return StudyPreset(name, base, [("80-20", {})])
    if name == "layerwise":
        return StudyPreset(name, replace(base, per_layer=True), [("80-20", {})])
    if name == "sensitivity":
        sweep = [(_label(x), {"shift": shift(x).to_dict()}) for x in SEVERITIES]
        # same-distribution swap: separates the effect of fresh data from the label shift
        sweep.append(("control-50-50", {"shift": shift(0.5).to_dict()}))
        return StudyPreset(name, base, sweep)
    if name == "scalability":
        base = replace(base, shift=shift(0.7))
        return StudyPreset(name, base, [(f"n{n}", {"n": n, "d": d, "m": m})
                                        for n, d, m in SCALABILITY])
    base = replace(base, r=10, s=6, e=4)  # e=4 leaves a full gradient window at s+1
    return StudyPreset(name, base, [("80-20", {})])


# --------------------------------------------------------------------------- #
# Running
# --------------------------------------------------------------------------- #

def _run_job(job: tuple) -> str:
    label, cfg_dict, repeat, out_dir, preset = job
    cfg = ExperimentConfig.from_dict(cfg_dict)
    result = run_experiment(cfg, repeat)
    path = write_run(result, Path(out_dir) / run_dir_name(label, repeat), label, preset)
    logger.info("wrote %s", path)
    return str(path)


def study_jobs(study: StudyPreset, out_dir) -> list[tuple]:
    repeats = [study.only_repeat] if study.only_repeat is not None else range(study.repeats)
    return [(label, cfg.to_dict(), k, str(out_dir), study.name)
            for label, cfg in study.points() for k in repeats]


def run_study(study: StudyPreset, out_dir, parallel: int = 1) -> list[str]:
    """Run every (sweep point, repeat); each run writes its own directory."""
    jobs = study_jobs(study, out_dir)
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def preset_overrides(study: StudyPreset, overrides: dict) -> StudyPreset:
    """Apply base-level overrides (e.g. seeds) to a study."""
    return replace(study, base=ExperimentConfig.from_dict(merge_dicts(study.base.to_dict(), overrides)))
