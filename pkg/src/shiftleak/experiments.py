"""Glue that turns an :class:`ExperimentConfig` into data, a model, a run and its scores."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attacker import AttackObserver, SolSeries
from .data import (LabeledDataset, ShiftSpec, apply_label_shift, load_census,
                   load_idx, relative_target_ratio, split_iid, synth_blobs)
from .detect import SensitivityPoint, score_all_rounds, sensitivity_table
from .errors import DatasetMissingError, InsufficientSamplesError
from .fl import ExperimentConfig, FederationData, run_centralized, run_federation
from .nn import Model, image_net_layers, init_model, tabular_net_layers

logger = logging.getLogger(__name__)

FETCH_HINT = {
    "mnist": "Download train-images-idx3-ubyte.gz and train-labels-idx1-ubyte.gz from the "
             "MNIST distribution and set dataset.images / dataset.labels to their paths.",
    "fashion_mnist": "Download train-images-idx3-ubyte.gz and train-labels-idx1-ubyte.gz from "
                     "the Fashion-MNIST repository and set dataset.images / dataset.labels.",
    "census": "Download adult.csv (Adult census income) and set dataset.csv to its path.",
}


def load_base_dataset(config: ExperimentConfig) -> LabeledDataset:
    ds = config.dataset
    if ds.kind == "synthetic":
        return synth_blobs(ds.num_classes, ds.samples_per_class, ds.dim, config.seeds.data,
                           ds.separation)
    paths = [ds.csv] if ds.kind == "census" else [ds.images, ds.labels]
    missing = [p for p in paths if not p or not Path(p).exists()]
    if missing:
        raise DatasetMissingError(
            f"{ds.kind} files not found ({', '.join(str(p) for p in missing)}). "
            f"{FETCH_HINT[ds.kind]} No download is attempted.")
    if ds.kind == "census":
        return load_census(ds.csv, encoding=ds.census_encoding)
    return load_idx(ds.images, ds.labels, ds.num_classes, ds.kind)


def build_model(config: ExperimentConfig, feature_shape: tuple, num_classes: int) -> Model:
    if config.architecture == "image":
        layers = image_net_layers(num_classes)
    else:
        layers = tabular_net_layers(num_classes)
        feature_shape = (int(np.prod(feature_shape)),)
    return init_model(feature_shape, layers, config.seeds.model)


def _flatten_if_needed(ds: LabeledDataset, config: ExperimentConfig) -> LabeledDataset:
    if config.architecture == "tabular" and ds.features.ndim > 2:
        return LabeledDataset(ds.features.reshape(len(ds), -1), ds.labels, ds.num_classes,
                              ds.name, ds.meta)
    return ds


def effective_shift(config: ExperimentConfig, pool: LabeledDataset) -> Optional[ShiftSpec]:
    """The shift spec to apply; with ``relative_shift`` the ratio scales the pool's odds."""
    if config.shift is None:
        return None
    if not config.relative_shift:
        return config.shift
    base = pool.fraction_in(config.shift.group_a)
    return replace(config.shift, target_ratio=relative_target_ratio(base, config.shift.target_ratio))


def build_federation_data(config: ExperimentConfig,
                          base: Optional[LabeledDataset] = None) -> FederationData:
    """Validation split, initial IID client sets and the round-``s`` swap schedule.

    All swapped-in sets are drawn without replacement from data no client has seen.
    """
    base = _flatten_if_needed(base if base is not None else load_base_dataset(config), config)
    n = config.n
    rest = len(base) - config.val_size - n * config.d
    if rest < 0:
        raise InsufficientSamplesError(
            f"dataset has {len(base)} samples; need {config.val_size} validation + {n} x {config.d}")
    parts = split_iid(base, n + 2, [config.val_size] + [config.d] * n + [rest], config.seeds.data)
    validation, clients, pool = parts[0], parts[1:n + 1], parts[-1]
    probe = validation.subset(np.arange(config.probe_size), "probe")

    rng = np.random.default_rng([config.seeds.data, 7])
    available = np.ones(len(pool), dtype=bool)
    swaps: dict[int, dict[int, LabeledDataset]] = {}
    shift = effective_shift(config, pool)
    shifting = config.shifting_clients if config.mode == "fl" else [0]

    def draw(spec: Optional[ShiftSpec]) -> LabeledDataset:
        idx = np.flatnonzero(available)
        sub = pool.subset(idx)
        seed = int(rng.integers(2**31))
        if spec is None:
            if len(sub) < config.d:
                raise InsufficientSamplesError("pool exhausted for benign swaps")
            pick = np.random.default_rng(seed).choice(len(sub), config.d, replace=False)
        else:
            pick = label_shift_indices(sub, spec, config.d, seed)
        available[idx[pick]] = False
        return sub.subset(pick, "swap")

    if shift is not None:
        ratios = config.client_ratios or [shift.target_ratio] * len(shifting)
        if len(ratios) != len(shifting):
            raise ValueError("client_ratios needs one ratio per shifting client")
        for c, ratio in zip(shifting, ratios):
            spec = shift if ratio == shift.target_ratio else replace(shift, target_ratio=ratio)
            swaps[c] = {config.s: draw(spec)}
    if config.benign_swap:
        for c in range(n):
            if c not in swaps:
                swaps[c] = {config.s: draw(None)}
    return FederationData(clients, validation, probe, swaps)


def label_shift_indices(pool: LabeledDataset, spec: ShiftSpec, out_size: int, seed: int) -> np.ndarray:
    """Indices into ``pool`` selected by :func:`apply_label_shift` with the same seed."""
    tagged = LabeledDataset(np.arange(len(pool), dtype=np.float64)[:, None], pool.labels,
                            pool.num_classes)
    return apply_label_shift(tagged, spec, out_size, seed).features[:, 0].astype(np.int64)


@dataclass
class RunResult:
    config: ExperimentConfig
    repeat: int
    records: list
    observer: AttackObserver
    reports: dict = field(default_factory=dict)  # series id -> list[DivergenceReport]
    base_config: Optional[ExperimentConfig] = None  # before the per-repeat seed offset

    @property
    def val_loss(self) -> dict:
        return {r.round: r.val_loss for r in self.records}

    def sol(self, per_layer: bool = False) -> list[SolSeries]:
        return [s for s in self.observer.series.values() if s.per_layer == per_layer]

    def z(self, series_id: str, round: int) -> float:
        for rep in self.reports.get(series_id, []):
            if rep.round == round:
                return rep.z_score
        raise KeyError(f"no report for {series_id} at round {round}")

    def sensitivity(self, lag: int = 1) -> list[SensitivityPoint]:
        return sensitivity_table(self.sol(), self.val_loss, self.config.s, self.config.e, lag)


def repeat_config(config: ExperimentConfig, repeat: int) -> ExperimentConfig:
    return replace(config, seeds=config.seeds.offset(1000 * repeat))


def run_experiment(config: ExperimentConfig, repeat: int = 0, *, base: Optional[LabeledDataset] = None,
                   keep_params: bool = False, hooks=()) -> RunResult:
    """Build everything for one repeat, run it with an attached observer and score every series."""
    config.check()
    cfg = repeat_config(config, repeat)
    data = build_federation_data(cfg, base)
    model = build_model(cfg, data.clients[0].feature_shape, data.clients[0].num_classes)
    observer = AttackObserver(model, data.probe, client_id=cfg.attacker,
                              influence_removal=cfg.influence_removal and cfg.mode == "fl",
                              per_layer=cfg.per_layer, cmd_moments=cfg.cmd_moments,
                              procrustes_normalize=cfg.procrustes_normalize)
    runner = run_centralized if cfg.mode == "centralized" else run_federation
    records = runner(cfg, data, model, [observer, *hooks], keep_params=keep_params)
    result = RunResult(cfg, repeat, records, observer, base_config=config)
    result.reports = score_run(result)
    return result


def score_run(result: RunResult) -> dict:
    e = result.config.e
    reports = {"val_loss": score_all_rounds(result.val_loss, e, "val_loss")}
    for s in result.observer.series.values():
        reports[s.series_id] = score_all_rounds(s, e)
    return reports


def first_flag(result: RunResult, threshold: float = 3.0, per_layer: bool = False,
               start: Optional[int] = None):
    """Earliest (round, series id, z) with z >= threshold among SoL series, or None."""
    start = start if start is not None else result.config.e + 2
    best = None
    for s in result.sol(per_layer):
        for rep in result.reports[s.series_id]:
            if rep.round >= start and rep.z_score >= threshold:
                cand = (rep.round, -rep.z_score, s.series_id)
                if best is None or cand < best:
                    best = cand
                break
    if best is None:
        return None
    return best[0], best[2], -best[1]
