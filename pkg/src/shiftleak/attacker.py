"""Honest-but-curious observer: attacker information, shift metrics and the per-round timeline.

The observer lives inside one client. Each round it sees only what that client
legitimately receives (the broadcast global parameters) plus its own previous
update, and turns them into three kinds of attacker information:

* ``weights``: the global parameters, or the other clients' mean once the
  attacker's own contribution has been removed;
* ``representations``: post-activation outputs of every layer on a probe set
  frozen at round 1;
* ``gradients``: the difference of consecutive weight vectors.

Consecutive rounds are compared with cosine similarity, Procrustes distance and
central moment discrepancy (CMD), both over the full model and layer by layer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .data import LabeledDataset
from .errors import (DegenerateFederationError, InputShapeError, LayoutError,
                     MomentUndefinedError, NormalizationError, TimelineError,
                     UndefinedSimilarityError)
from .nn import Model, ParamVector, Segment, forward

logger = logging.getLogger(__name__)

INFO_KINDS = ("weights", "representations", "gradients")
METRICS = ("cosine", "procrustes", "cmd")
FULL = "full"


@dataclass(frozen=True, eq=False)
class AttackerInfoVector:
    """One round's attacker information as a flat vector.

    For representations every segment is a row-major ``rows x neurons`` block
    (rows are probe samples). Weights and gradients have ``rows=None``.
    """
    kind: str
    round: int
    values: np.ndarray
    layout: tuple[Segment, ...]
    rows: Optional[int] = None

    def __post_init__(self):
        if self.kind not in INFO_KINDS:
            raise ValueError(f"unknown attacker information kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise LayoutError("attacker information must be flat")
        object.__setattr__(self, "values", v)

    @property
    def layers(self) -> list[int]:
        return [s.layer for s in self.layout]

    def layer(self, layer: int) -> "AttackerInfoVector":
        for s in self.layout:
            if s.layer == layer:
                return AttackerInfoVector(self.kind, self.round,
                                          self.values[s.offset:s.offset + s.length],
                                          (Segment(layer, 0, s.length),), self.rows)
        raise KeyError(f"no layer {layer} in attacker information")

    def samples(self) -> np.ndarray:
        """Sample matrix for moment statistics: rows x coordinates."""
        if self.rows is None:
            return self.values[:, None]
        blocks = [self.values[s.offset:s.offset + s.length].reshape(self.rows, -1)
                  for s in self.layout]
        return np.hstack(blocks)


Vectorish = Union[AttackerInfoVector, ParamVector, np.ndarray]


def _flat(v: Vectorish) -> np.ndarray:
    if isinstance(v, (AttackerInfoVector, ParamVector)):
        return v.values
    return np.asarray(v, dtype=np.float64).ravel()


def _check_pair(a: Vectorish, b: Vectorish) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, AttackerInfoVector) and isinstance(b, AttackerInfoVector):
        if a.kind != b.kind:
            raise LayoutError(f"cannot compare {a.kind} with {b.kind}")
        if a.layout != b.layout or a.rows != b.rows:
            raise LayoutError("attacker information layouts differ")
    x, y = _flat(a), _flat(b)
    if x.shape != y.shape:
        raise LayoutError(f"vector sizes differ: {x.size} vs {y.size}")
    return x, y


# --------------------------------------------------------------------------- #
# Information acquisition
# --------------------------------------------------------------------------- #

def extract_target(global_params: ParamVector, own_update: ParamVector, n: int) -> ParamVector:
    """Undo uniform averaging: the mean of the other ``n - 1`` clients' updates."""
    if n < 2:
        raise DegenerateFederationError("influence removal needs at least two clients")
    global_params.check_layout(own_update)
    return global_params.with_values((n * global_params.values - own_update.values) / (n - 1))


def capture_representations(model: Model, probe: LabeledDataset, round: int = 0,
                            chunk: int = 256) -> AttackerInfoVector:
    """Post-activation output of every layer for every probe sample."""
    x = probe.features
    if x.shape[1:] != model.input_shape:
        raise InputShapeError(
            f"probe features {x.shape[1:]} do not match model input {model.input_shape}")
    per_layer: list[list[np.ndarray]] = [[] for _ in model.layers]
    for i in range(0, len(x), chunk):
        _, acts = forward(model, x[i:i + chunk], capture_activations=True)
        for j, a in enumerate(acts):
            per_layer[j].append(a.reshape(a.shape[0], -1))
    blocks = [np.concatenate(b) for b in per_layer]
    layout = []
    offset = 0
    for j, b in enumerate(blocks):
        layout.append(Segment(j, offset, b.size))
        offset += b.size
    return AttackerInfoVector("representations", round,
                              np.concatenate([b.ravel() for b in blocks]), tuple(layout),
                              rows=len(x))


def weights_info(params: ParamVector, round: int = 0) -> AttackerInfoVector:
    return AttackerInfoVector("weights", round, params.values.copy(), params.layout)


def approximate_gradients(weights_t: Vectorish, weights_prev: Vectorish,
                          round: Optional[int] = None) -> AttackerInfoVector:
    """Pseudo-gradient ``weights_prev - weights_t``."""
    if isinstance(weights_t, (AttackerInfoVector, ParamVector)) and \
            isinstance(weights_prev, (AttackerInfoVector, ParamVector)):
        if weights_t.layout != weights_prev.layout:
            raise LayoutError("weight vectors have different layouts")
        layout = weights_t.layout
    else:
        layout = None
    cur, prev = _flat(weights_t), _flat(weights_prev)
    if cur.shape != prev.shape:
        raise LayoutError(f"vector sizes differ: {cur.size} vs {prev.size}")
    if layout is None:
        layout = (Segment(0, 0, cur.size),)
    if round is None:
        round = getattr(weights_t, "round", 0)
    return AttackerInfoVector("gradients", round, prev - cur, layout)


# --------------------------------------------------------------------------- #
# Shift metrics
# --------------------------------------------------------------------------- #

def cosine_similarity(a: Vectorish, b: Vectorish) -> float:
    x, y = _check_pair(a, b)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector is undefined")
    # clip guards rounding just outside [-1, 1]
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def procrustes_distance(a: Vectorish, b: Vectorish, normalize: bool = True) -> float:
    """Frobenius norm of ``a - b``; inputs are first scaled to unit norm unless ``normalize=False``."""
    x, y = _check_pair(a, b)
    if normalize:
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0.0 or ny == 0.0:
            raise NormalizationError("cannot normalise a zero-norm input")
        x, y = x / nx, y / ny
    d = x - y
    return float(np.sqrt(np.dot(d, d)))


def _sample_matrix(v: Vectorish) -> np.ndarray:
    if isinstance(v, AttackerInfoVector):
        return v.samples()
    if isinstance(v, ParamVector):
        return v.values[:, None]
    arr = np.asarray(v, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def cmd(a: Vectorish, b: Vectorish, k: int = 5) -> float:
    """Central moment discrepancy up to order ``k`` (no interval normalisation).

    Rows of the sample matrices are samples, columns coordinates; a flat vector
    is a set of scalar samples.
    """
    if isinstance(a, AttackerInfoVector) and isinstance(b, AttackerInfoVector):
        _check_pair(a, b)
    x, y = _sample_matrix(a), _sample_matrix(b)
    if x.shape[1] != y.shape[1]:
        raise LayoutError(f"sample dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise MomentUndefinedError("central moments need at least two samples")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    total = np.linalg.norm(mx - my)
    cx, cy = x - mx, y - my
    px, py = cx.copy(), cy.copy()
    for _ in range(2, k + 1):
        px *= cx
        py *= cy
        total += np.linalg.norm(px.mean(axis=0) - py.mean(axis=0))
    return float(total)


METRIC_FUNCS: dict[str, Callable[..., float]] = {
    "cosine": cosine_similarity,
    "procrustes": procrustes_distance,
    "cmd": cmd,
}


# --------------------------------------------------------------------------- #
# Series bookkeeping and the observer
# --------------------------------------------------------------------------- #

@dataclass
class SolSeries:
    """One (information kind, metric, layer) time series, keyed by round."""
    info_kind: str
    metric: str
    layer: Union[str, int] = FULL
    series: dict = field(default_factory=dict)

    @property
    def per_layer(self) -> bool:
        return self.layer != FULL

    @property
    def key(self) -> tuple:
        return (self.info_kind, self.metric, self.layer)

    @property
    def series_id(self) -> str:
        return f"{self.info_kind}/{self.metric}/{self.layer}"

    @property
    def rounds(self) -> np.ndarray:
        return np.array(sorted(self.series), dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return np.array([self.series[r] for r in sorted(self.series)], dtype=np.float64)

    def append(self, round: int, value: float) -> None:
        if not np.isfinite(value):
            raise ValueError(f"{self.series_id}: non-finite value at round {round}")
        self.series[int(round)] = float(value)


def normalize_series(series: SolSeries) -> SolSeries:
    """Min-max scale one series to [0, 1] (a constant series maps to zeros).

    Used for per-layer plots, where each layer's series is scaled on its own.
    """
    vals = series.values
    lo, span = (vals.min(), np.ptp(vals)) if len(vals) else (0.0, 0.0)
    scaled = (vals - lo) / span if span > 0 else np.zeros_like(vals)
    return SolSeries(series.info_kind, series.metric, series.layer,
                     {int(t): float(v) for t, v in zip(series.rounds, scaled)})


@dataclass(frozen=True)
class RoundContext:
    """What the attacker client may read in one round.

    ``own_update`` is the parameter vector this client sent to the server in the
    previous round (``None`` in round 1).
    """
    round: int
    global_params: ParamVector
    own_update: Optional[ParamVector]
    n_clients: int


class AttackObserver:
    """Tracks all sources of leakage from the attacker's point of view.

    Parameters
    ----------
    model : Model
        Architecture template; only its layer list and input shape are used.
    probe : LabeledDataset
        Fixed probe samples used for the representations.
    influence_removal : bool
        Subtract the attacker's own update before analysis (needs n >= 2).
    per_layer : bool
        Also record every metric per layer.
    procrustes_normalize : bool
        Unit-normalise inputs of the Procrustes distance.
    """

    def __init__(self, model: Model, probe: LabeledDataset, *, client_id: int = 0,
                 influence_removal: bool = True, per_layer: bool = True,
                 cmd_moments: int = 5, procrustes_normalize: bool = True,
                 metrics=METRICS, info_kinds=INFO_KINDS):
        self.template = model
        self.probe = probe
        self.client_id = client_id
        self.influence_removal = influence_removal
        self.per_layer = per_layer
        self.cmd_moments = cmd_moments
        self.procrustes_normalize = procrustes_normalize
        self.metrics = tuple(metrics)
        self.info_kinds = tuple(info_kinds)
        self.series: dict[tuple, SolSeries] = {}
        self.undefined: list[tuple[int, str]] = []
        self.last_round: Optional[int] = None
        self._prev: dict[str, AttackerInfoVector] = {}

    def __call__(self, ctx: RoundContext, record=None) -> None:
        self.observe_round(ctx)

    def _metric(self, name: str, a: AttackerInfoVector, b: AttackerInfoVector) -> float:
        if name == "cmd":
            return cmd(a, b, self.cmd_moments)
        if name == "procrustes":
            return procrustes_distance(a, b, normalize=self.procrustes_normalize)
        return cosine_similarity(a, b)

    def _record(self, round: int, cur: AttackerInfoVector, prev: AttackerInfoVector) -> None:
        targets = [(FULL, cur, prev)]
        if self.per_layer:
            targets += [(layer, cur.layer(layer), prev.layer(layer)) for layer in cur.layers]
        for layer, a, b in targets:
            for metric in self.metrics:
                key = (cur.kind, metric, layer)
                try:
                    value = self._metric(metric, a, b)
                except (UndefinedSimilarityError, NormalizationError) as exc:
                    self.undefined.append((round, f"{cur.kind}/{metric}/{layer}"))
                    logger.info("round %d: %s/%s/%s undefined (%s)", round, cur.kind, metric,
                                layer, exc)
                    continue
                series = self.series.get(key)
                if series is None:
                    series = self.series[key] = SolSeries(cur.kind, metric, layer)
                series.append(round, value)

    def target_weights(self, ctx: RoundContext) -> ParamVector:
        if not self.influence_removal or ctx.n_clients < 2 or ctx.round == 1:
            return ctx.global_params
        if ctx.own_update is None:
            raise TimelineError(f"round {ctx.round}: own update from the previous round missing")
        return extract_target(ctx.global_params, ctx.own_update, ctx.n_clients)

    def observe_round(self, ctx: RoundContext) -> None:
        """Acquire this round's information and extend every series it completes."""
        t = ctx.round
        if t < 1:
            raise TimelineError("rounds are numbered from 1")
        if t > 1 and self.last_round != t - 1:
            raise TimelineError(f"round {t} observed without state from round {t - 1}")
        if t == 1 and self.last_round is not None:
            raise TimelineError("observer already started; create a new one per run")

        weights = weights_info(self.target_weights(ctx), t)
        current = {"weights": weights}
        if "representations" in self.info_kinds:
            model = self.template.with_params(weights.values)
            current["representations"] = capture_representations(model, self.probe, t)
        if t >= 2:
            current["gradients"] = approximate_gradients(weights, self._prev["weights"], t)

        for kind in self.info_kinds:
            if kind in current and kind in self._prev:
                self._record(t, current[kind], self._prev[kind])
        self._prev = current
        self.last_round = t

    def full_series(self) -> list[SolSeries]:
        return [s for s in self.series.values() if not s.per_layer]

    def get(self, info_kind: str, metric: str, layer: Union[str, int] = FULL) -> SolSeries:
        return self.series[(info_kind, metric, layer)]
