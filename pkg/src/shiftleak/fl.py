"""In-process FedAvg simulation with scheduled dataset swaps."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .attacker import RoundContext
from .data import LabeledDataset, ShiftSpec
from .errors import ConfigError, LayoutError, ShiftLeakError
from .nn import Model, ParamVector, TrainState, evaluate, train_epochs

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Seeds:
    model: int = 0
    data: int = 0
    order: int = 0

    def offset(self, k: int) -> "Seeds":
        return Seeds(self.model + k, self.data + k, self.order + k)


@dataclass(frozen=True)
class DatasetConfig:
    """Where the data comes from. ``kind`` is synthetic, mnist, fashion_mnist or census."""
    kind: str = "synthetic"
    images: Optional[str] = None
    labels: Optional[str] = None
    csv: Optional[str] = None
    census_encoding: str = "ordinal"
    num_classes: int = 10
    dim: int = 12
    samples_per_class: int = 3000
    separation: float = 3.0


DATASET_KINDS = ("synthetic", "mnist", "fashion_mnist", "census")


@dataclass(frozen=True)
class ExperimentConfig:
    """Parameters of one run, named after the experiment table (r, s, d, n, m, l)."""
    r: int = 20
    s: int = 11
    d: int = 6700
    n: int = 2
    m: int = 1
    l: int = 2
    shift: Optional[ShiftSpec] = None
    seeds: Seeds = Seeds()
    mode: str = "fl"
    architecture: str = "tabular"
    dataset: DatasetConfig = DatasetConfig()
    lr: float = 1e-4
    batch_size: int = 64
    e: int = 5
    probe_size: int = 256
    val_size: int = 1000
    attacker: int = 0
    influence_removal: bool = True
    benign_swap: bool = False
    relative_shift: bool = False
    client_ratios: Optional[list] = None
    reset_optimizer: bool = False
    per_layer: bool = True
    procrustes_normalize: bool = True
    cmd_moments: int = 5

    @property
    def shifting_clients(self) -> list[int]:
        """The m clients after the attacker, wrapping around."""
        return [(self.attacker + 1 + i) % self.n for i in range(self.m)]

    def violations(self) -> list[str]:
        v = []
        if self.mode not in ("fl", "centralized"):
            v.append(f"mode: must be 'fl' or 'centralized', got {self.mode!r}")
        if self.architecture not in ("tabular", "image"):
            v.append(f"architecture: must be 'tabular' or 'image', got {self.architecture!r}")
        if self.dataset.kind not in DATASET_KINDS:
            v.append(f"dataset.kind: unknown dataset {self.dataset.kind!r}")
        if self.r < 2:
            v.append("r: need at least 2 rounds")
        if self.s > self.r:
            v.append("s: shift round after end (s > r)")
        if self.s <= 1:
            v.append("s: shift round must be > 1")
        if self.d < 1:
            v.append("d: dataset size must be positive")
        if self.l < 1:
            v.append("l: need at least one local epoch")
        if self.mode == "centralized":
            if self.n != 1:
                v.append("n: centralized runs use exactly one model (n = 1)")
        else:
            if self.n < 2:
                v.append("n: a federation needs at least 2 clients")
            if not 1 <= self.m < self.n:
                v.append("m: shifting-client count must satisfy 1 <= m < n")
            if not 0 <= self.attacker < self.n:
                v.append("attacker: index outside 0..n-1")
            elif self.attacker in self.shifting_clients:
                v.append("attacker: the attacker cannot be a shifting client")
        if self.lr < 0:
            v.append("lr: must be non-negative")
        if self.batch_size < 1:
            v.append("batch_size: must be positive")
        if self.e < 2:
            v.append("e: trend window needs at least 2 rounds")
        if self.probe_size < 2:
            v.append("probe_size: need at least 2 probe samples")
        if self.val_size < self.probe_size:
            v.append("val_size: must be at least probe_size")
        if self.shift is not None and self.shift.num_classes != self.dataset.num_classes:
            v.append("shift: class groups do not cover dataset.num_classes")
        if self.client_ratios is not None:
            if self.shift is None:
                v.append("client_ratios: given without a shift")
            elif len(self.client_ratios) != len(self.shifting_clients):
                v.append("client_ratios: need one ratio per shifting client (m)")
            if any(not isinstance(x, (int, float)) or not 0 < x < 1 for x in self.client_ratios):
                v.append("client_ratios: every ratio must lie in (0, 1)")
        if self.cmd_moments < 1:
            v.append("cmd_moments: must be >= 1")
        return v

    def check(self) -> "ExperimentConfig":
        v = self.violations()
        if v:
            raise ConfigError(v)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shift"] = None if self.shift is None else self.shift.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in sorted(unknown)])
        kw = dict(d)
        try:
            if kw.get("shift") is not None:
                kw["shift"] = ShiftSpec.from_dict(kw["shift"])
            if "seeds" in kw:
                kw["seeds"] = Seeds(**kw["seeds"])
            if "dataset" in kw:
                kw["dataset"] = DatasetConfig(**kw["dataset"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid nested field: {exc}") from None
        for f in fields(cls):
            if f.name in kw and f.type in ("int", "float", "bool") and \
                    not isinstance(kw[f.name], (int, float, bool)):
                raise ConfigError(f"{f.name}: expected {f.type}, got {kw[f.name]!r}")
        return cls(**kw)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(merge_dicts(self.to_dict(), overrides))


def merge_dicts(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "shift":
            out[k] = merge_dicts(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    """Read a JSON config file into a plain dict."""
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


# --------------------------------------------------------------------------- #
# Simulation state
# --------------------------------------------------------------------------- #

@dataclass
class ClientState:
    id: int
    dataset: LabeledDataset
    swaps: dict = field(default_factory=dict)
    model: Optional[Model] = None
    train_state: Optional[TrainState] = None
    update: Optional[ParamVector] = None


@dataclass
class FederationData:
    """Initial client datasets, the swap schedule and the attacker's held-out data."""
    clients: list
    validation: Optional[LabeledDataset] = None
    probe: Optional[LabeledDataset] = None
    swaps: dict = field(default_factory=dict)  # client id -> {round: dataset}


@dataclass
class RoundRecord:
    """Telemetry of one round, taken at broadcast time (before local training)."""
    round: int
    global_params: Optional[ParamVector]
    val_loss: float = float("nan")
    val_acc: float = float("nan")
    client_val_loss: dict = field(default_factory=dict)
    client_val_acc: dict = field(default_factory=dict)
    client_train_loss: dict = field(default_factory=dict)
    swapped: list = field(default_factory=list)
    aggregate: Optional[ParamVector] = None
    artifacts: dict = field(default_factory=dict)


class HookError(ShiftLeakError, RuntimeError):
    """A round hook failed; ``records`` holds everything completed so far."""

    def __init__(self, round: int, exc: BaseException, records: list):
        super().__init__(f"hook failed in round {round}: {exc!r}")
        self.round = round
        self.records = records


def fedavg_aggregate(updates: Sequence[ParamVector]) -> ParamVector:
    """Uniform element-wise mean, summed in client order."""
    if not updates:
        raise ValueError("nothing to aggregate")
    first = updates[0]
    first.check_layout(*updates[1:])
    total = first.values.copy()
    for u in updates[1:]:
        total += u.values
    return first.with_values(total / len(updates))


def _readonly(pv: ParamVector) -> ParamVector:
    v = pv.values.copy()
    v.flags.writeable = False
    return ParamVector(v, pv.layout)


def client_order_seed(order_seed: int, client: int) -> int:
    return int(np.random.SeedSequence([order_seed, client]).generate_state(1)[0])


def run_federation(config: ExperimentConfig, data: FederationData, model: Model,
                   hooks: Sequence[Callable] = (), keep_params: bool = True) -> list[RoundRecord]:
    """FedAvg for ``config.r`` rounds.

    Each round: scheduled swaps take effect, the broadcast is recorded and
    passed to the hooks, every client trains ``config.l`` epochs from the
    broadcast, and the server averages all client parameter vectors.
    A client's optimizer moments and data order persist across rounds unless
    ``config.reset_optimizer`` is set.
    """
    n = len(data.clients)
    if n < 1:
        raise ValueError("no clients")
    if n > 1 and config.attacker in config.shifting_clients:
        raise ConfigError("attacker: the attacker cannot be a shifting client")
    clients = [ClientState(i, ds, dict(data.swaps.get(i, {}))) for i, ds in enumerate(data.clients)]
    for c in clients:
        c.train_state = TrainState.fresh(model, client_order_seed(config.seeds.order, c.id))

    global_params = model.params
    records: list[RoundRecord] = []
    for t in range(1, config.r + 1):
        rec = RoundRecord(t, _readonly(global_params) if keep_params else None)
        for c in clients:
            if t in c.swaps:
                if len(c.swaps[t]) != len(c.dataset):
                    raise ValueError(f"client {c.id}: swap at round {t} changes dataset size")
                c.dataset = c.swaps[t]
                rec.swapped.append(c.id)
        global_model = model.with_params(global_params)
        if data.validation is not None:
            rec.val_loss, rec.val_acc = evaluate(global_model, data.validation)

        prev_update = clients[config.attacker].update if n > 1 else None
        ctx = RoundContext(t, _readonly(global_params),
                           None if prev_update is None else _readonly(prev_update), n)
        for hook in hooks:
            try:
                hook(ctx, rec)
            except Exception as exc:
                records.append(rec)
                raise HookError(t, exc, records) from exc

        for c in clients:
            if config.reset_optimizer:
                c.train_state = TrainState(type(c.train_state.adam).zeros_like(global_params),
                                           c.train_state.order_rng)
            hist_len = len(c.train_state.history)
            c.model = train_epochs(global_model, c.dataset, config.l, config.batch_size,
                                   config.lr, state=c.train_state)
            c.update = c.model.params
            rec.client_train_loss[c.id] = float(np.mean(c.train_state.history[hist_len:]))
            if data.validation is not None and n > 1:
                rec.client_val_loss[c.id], rec.client_val_acc[c.id] = evaluate(
                    c.model, data.validation)
        global_params = fedavg_aggregate([c.update for c in clients])
        if keep_params:
            rec.aggregate = _readonly(global_params)
        records.append(rec)
        logger.info("round %d: val_loss=%.5f val_acc=%.4f", t, rec.val_loss, rec.val_acc)
    return records


def run_centralized(config: ExperimentConfig, data: FederationData, model: Model,
                    hooks: Sequence[Callable] = (), keep_params: bool = True) -> list[RoundRecord]:
    """Single-model training; epochs play the role of rounds.

    Implemented as a one-client federation with one local epoch per round,
    which makes the two paths bit-identical by construction.
    """
    if len(data.clients) != 1:
        raise ValueError("centralized training takes exactly one dataset")
    cfg = replace(config, l=1, attacker=0, mode="centralized")
    return run_federation(cfg, data, model, hooks, keep_params)


def final_params(records: list[RoundRecord]) -> ParamVector:
    """Parameters after the last aggregation."""
    if not records or records[-1].aggregate is None:
        raise LayoutError("records do not carry parameters")
    return records[-1].aggregate
