"""Trend-divergence scoring by linear extrapolation over a trailing window."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Union

import numpy as np

from .errors import WindowError

DEFAULT_WINDOW = 5
RMSE_FLOOR = 1e-12


@dataclass(frozen=True)
class DivergenceReport:
    series_id: str
    round: int
    expected: float
    measured: float
    divergence: float
    relative_divergence: float
    z_score: float

    def to_dict(self) -> dict:
        return asdict(self)


SeriesLike = Union[Mapping[int, float], "object"]


def _as_mapping(series) -> Mapping[int, float]:
    if hasattr(series, "series"):
        return series.series
    return series


def _window(series, round: int, e: int) -> tuple[np.ndarray, np.ndarray]:
    if e < 2:
        raise WindowError("a linear trend needs a window of at least 2 rounds")
    data = _as_mapping(series)
    ts = np.arange(round - e, round)
    try:
        ys = np.array([data[int(t)] for t in ts], dtype=np.float64)
    except KeyError as exc:
        raise WindowError(
            f"round {round}: need values for rounds {round - e}..{round - 1}, "
            f"missing {exc.args[0]}") from None
    return ts.astype(np.float64), ys


def _fit(ts: np.ndarray, ys: np.ndarray) -> tuple[float, float, float]:
    """OLS line in centred coordinates: (intercept at mean t, slope, mean t)."""
    t_mean = ts.mean()
    dt = ts - t_mean
    slope = float(np.dot(dt, ys - ys.mean()) / np.dot(dt, dt))
    return float(ys.mean()), slope, float(t_mean)


def extrapolate(series, round: int, e: int = DEFAULT_WINDOW) -> float:
    """Least-squares line through rounds ``round-e .. round-1``, evaluated at ``round``."""
    ts, ys = _window(series, round, e)
    level, slope, t_mean = _fit(ts, ys)
    return level + slope * (round - t_mean)


def score_divergence(series, round: int, e: int = DEFAULT_WINDOW,
                     series_id: Optional[str] = None) -> DivergenceReport:
    """Gap between the measured value at ``round`` and its linear extrapolation.

    ``z_score`` divides the absolute gap by the root-MSE of the fit residuals
    over the window, ``sqrt(SSE / (e - 2))``, floored at 1e-12.
    """
    ts, ys = _window(series, round, e)
    data = _as_mapping(series)
    if round not in data:
        raise WindowError(f"no measured value at round {round}")
    level, slope, t_mean = _fit(ts, ys)
    expected = level + slope * (round - t_mean)
    resid = ys - (level + slope * (ts - t_mean))
    # root-MSE of a two-parameter regression: residual sum of squares over e - 2 dof
    rmse = max(float(np.sqrt(np.dot(resid, resid) / max(len(ts) - 2, 1))), RMSE_FLOOR)
    measured = float(data[round])
    div = abs(measured - expected)
    rel = div / max(abs(expected), RMSE_FLOOR)
    if series_id is None:
        series_id = getattr(series, "series_id", "")
    return DivergenceReport(series_id, int(round), expected, measured, div, rel, div / rmse)


def score_all_rounds(series, e: int = DEFAULT_WINDOW, series_id: Optional[str] = None):
    """Reports for every round that has a full window of history."""
    data = _as_mapping(series)
    out = []
    for t in sorted(data):
        if all((t - k) in data for k in range(1, e + 1)):
            out.append(score_divergence(data, t, e, series_id or getattr(series, "series_id", "")))
    return out


@dataclass(frozen=True)
class SensitivityPoint:
    series_id: str
    round: int
    valloss_divergence: float
    sol_divergence: float
    valloss_z: float
    sol_z: float

    @property
    def above_diagonal(self) -> bool:
        return self.sol_z > self.valloss_z


def sensitivity_table(sol_series, val_loss, shift_round: int, e: int = DEFAULT_WINDOW,
                      lag: int = 1) -> list[SensitivityPoint]:
    """One (validation-loss, SoL) divergence pair per series at the detection round.

    ``sol_series`` is an iterable of series objects (with ``series_id``) or a
    mapping ``series_id -> {round: value}``. The detection round is
    ``shift_round + lag``; the default lag of 1 reflects that a broadcast model
    only contains the previous round's training.
    """
    detect_round = shift_round + lag
    if hasattr(sol_series, "items"):
        items = list(sol_series.items())
    else:
        items = [(s.series_id, s) for s in sol_series]
    try:
        vl = score_divergence(val_loss, detect_round, e, "val_loss")
        points = []
        for sid, s in items:
            rep = score_divergence(s, detect_round, e, sid)
            points.append(SensitivityPoint(sid, detect_round, vl.divergence, rep.divergence,
                                           vl.z_score, rep.z_score))
    except WindowError as exc:
        raise WindowError(f"shift round {shift_round} outside the detection window: {exc}") from None
    return points
