"""Scenario-level criticality metrics between an actor pair.

Every metric is minimized: smaller values mean a more critical scenario.
Time metrics are capped at ``TIME_CAP`` seconds, distance metrics at
``DISTANCE_CAP`` metres; a capped result is flagged and never ranks as more
critical than an uncapped one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import numpy as np

from .geometry import ConflictRegion
from .simulator import SimulationTrace

TIME_CAP = 20.0
DISTANCE_CAP = 200.0
SPEED_EPS = 0.1


class MetricKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    TRAJECTORY = "trajectory"
    WTTC = "wttc"
    GAP_TIME = "gap_time"
    PET = "pet"

    @property
    def is_time(self) -> bool:
        return self in (MetricKind.WTTC, MetricKind.GAP_TIME, MetricKind.PET)

    @property
    def default_cap(self) -> float:
        return TIME_CAP if self.is_time else DISTANCE_CAP


class MetricError(KeyError):
    pass


@dataclass(frozen=True)
class MetricResult:
    kind: MetricKind
    value: float
    t_star: Optional[float] = None
    capped: bool = False

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "value": self.value, "t_star": self.t_star, "capped": self.capped}


def _capped(kind: MetricKind, cap: Optional[float]) -> MetricResult:
    cap = kind.default_cap if cap is None else cap
    return MetricResult(kind, cap, None, True)


def _finish(kind: MetricKind, values: np.ndarray, t: np.ndarray, cap: Optional[float]) -> MetricResult:
    """Min-aggregate a per-timestep series; NaN marks invalid timesteps."""
    cap = kind.default_cap if cap is None else cap
    if values.size == 0 or np.all(np.isnan(values)):
        return MetricResult(kind, cap, None, True)
    k = int(np.nanargmin(values))
    v = float(values[k])
    if v >= cap:
        return MetricResult(kind, cap, None, True)
    return MetricResult(kind, v, float(t[k]), False)


def _pair(trace: SimulationTrace, a: str, b: str):
    if a not in trace.actors or b not in trace.actors:
        raise MetricError(f"actor pair ({a}, {b}) not in trace")
    ta, tb = trace.actors[a], trace.actors[b]
    both = ta.present & tb.present
    return ta, tb, both


def euclidean_min(trace: SimulationTrace, a: str, b: str, cap: Optional[float] = None) -> MetricResult:
    ta, tb, both = _pair(trace, a, b)
    d = np.hypot(ta.x - tb.x, ta.y - tb.y)
    d[~both] = np.nan
    return _finish(MetricKind.EUCLIDEAN, d, trace.t, cap)


def trajectory_min(trace: SimulationTrace, a: str, b: str, region: Optional[ConflictRegion], cap: Optional[float] = None) -> MetricResult:
    """Summed remaining path distance of both actors to the conflict entry."""
    if region is None:
        return _capped(MetricKind.TRAJECTORY, cap)
    ta, tb, both = _pair(trace, a, b)
    ea, xa = region.for_actor(a)
    eb, xb = region.for_actor(b)
    valid = both & (ta.s <= xa) & (tb.s <= xb)
    d = np.maximum(0.0, ea - ta.s) + np.maximum(0.0, eb - tb.s)
    d[~valid] = np.nan
    return _finish(MetricKind.TRAJECTORY, d, trace.t, cap)


def wttc_series(gap: np.ndarray, speed_sum: np.ndarray, accel_sum: float) -> np.ndarray:
    """Smallest tau >= 0 with gap <= speed_sum*tau + accel_sum*tau^2/2; NaN if unreachable."""
    half_a = 0.5 * accel_sum
    disc = speed_sum * speed_sum + 4.0 * half_a * np.maximum(gap, 0.0)
    denom = speed_sum + np.sqrt(disc)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tau = np.where(denom > 0, 2.0 * gap / denom, np.nan)
    return np.where(gap <= 0, 0.0, tau)


def wttc_min(trace: SimulationTrace, a: str, b: str, cap: Optional[float] = None) -> MetricResult:
    ta, tb, both = _pair(trace, a, b)
    sa, sb = trace.specs[a], trace.specs[b]
    gap = np.hypot(ta.x - tb.x, ta.y - tb.y) - (sa.footprint_radius + sb.footprint_radius)
    tau = wttc_series(gap, ta.v + tb.v, sa.max_accel + sb.max_accel)
    tau[~both] = np.nan
    return _finish(MetricKind.WTTC, tau, trace.t, cap)


def gap_time_min(trace: SimulationTrace, a: str, b: str, region: Optional[ConflictRegion], cap: Optional[float] = None) -> MetricResult:
    """Difference of predicted arrival times at the conflict entry."""
    if region is None:
        return _capped(MetricKind.GAP_TIME, cap)
    ta, tb, both = _pair(trace, a, b)
    ea, _ = region.for_actor(a)
    eb, _ = region.for_actor(b)
    valid = both & (ta.s < ea) & (tb.s < eb) & (ta.v > SPEED_EPS) & (tb.v > SPEED_EPS)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        gt = np.abs((ea - ta.s) / ta.v - (eb - tb.s) / tb.v)
    gt[~valid] = np.nan
    return _finish(MetricKind.GAP_TIME, gt, trace.t, cap)


def occupancy_interval(t: np.ndarray, s: np.ndarray, present: np.ndarray, entry: float, exit_: float, margin: float = 0.0) -> Optional[Tuple[float, float]]:
    """First and last sample time with ``s`` in ``[entry - margin, exit + margin]``."""
    inside = present & (s >= entry - margin) & (s <= exit_ + margin)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return None
    return float(t[idx[0]]), float(t[idx[-1]])


def pet(trace: SimulationTrace, a: str, b: str, region: Optional[ConflictRegion], cap: Optional[float] = None) -> MetricResult:
    """Time between one actor leaving the conflict region and the other entering it.

    The region's entry and exit already include both footprints, so occupancy
    is taken on ``[entry, exit]`` without a further margin.
    """
    if region is None:
        return _capped(MetricKind.PET, cap)
    ta, tb, _ = _pair(trace, a, b)
    ea, xa = region.for_actor(a)
    eb, xb = region.for_actor(b)
    ia = occupancy_interval(trace.t, ta.s, ta.present, ea, xa)
    ib = occupancy_interval(trace.t, tb.s, tb.present, eb, xb)
    if ia is None or ib is None:
        return _capped(MetricKind.PET, cap)
    first, second = (ia, ib) if ia[0] <= ib[0] else (ib, ia)
    value = max(0.0, second[0] - first[1])
    cap_v = MetricKind.PET.default_cap if cap is None else cap
    if value >= cap_v:
        return _capped(MetricKind.PET, cap)
    return MetricResult(MetricKind.PET, value, second[0], False)


def evaluate(
    kind,
    trace: SimulationTrace,
    pair: Tuple[str, str],
    regions: Mapping[Tuple[str, str], ConflictRegion],
    cap: Optional[float] = None,
) -> MetricResult:
    """Dispatch to one metric; an ego collision inside ``pair`` forces time metrics to 0."""
    kind = MetricKind(kind)
    a, b = pair
    if kind is MetricKind.EUCLIDEAN:
        return euclidean_min(trace, a, b, cap)
    if trace.collision is not None and set(trace.collision) == {a, b} and kind.is_time:
        return MetricResult(kind, 0.0, float(trace.t[-1]), False)
    region = regions.get((a, b))
    if kind is MetricKind.TRAJECTORY:
        return trajectory_min(trace, a, b, region, cap)
    if kind is MetricKind.WTTC:
        return wttc_min(trace, a, b, cap)
    if kind is MetricKind.GAP_TIME:
        return gap_time_min(trace, a, b, region, cap)
    return pet(trace, a, b, region, cap)


def evaluate_all(trace: SimulationTrace, pair: Tuple[str, str], regions, cap: Optional[Mapping[str, float]] = None) -> dict:
    cap = cap or {}
    return {k.value: evaluate(k, trace, pair, regions, cap.get(k.value)) for k in MetricKind}
