"""Planar polyline paths with arc-length parameterization and conflict regions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import LineString, Polygon


class PathError(ValueError):
    pass


def _vertex_curvature(points: np.ndarray) -> np.ndarray:
    """Unsigned curvature per vertex from the circle through each vertex triple.

    Endpoints replicate their neighbour, which makes their curvature zero.
    """
    n = len(points)
    kappa = np.zeros(n)
    if n < 3:
        return kappa
    p0, p1, p2 = points[:-2], points[1:-1], points[2:]
    a = np.linalg.norm(p1 - p0, axis=1)
    b = np.linalg.norm(p2 - p1, axis=1)
    c = np.linalg.norm(p2 - p0, axis=1)
    cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    denom = a * b * c
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(denom > 0, 2.0 * np.abs(cross) / denom, 0.0)
    kappa[1:-1] = k
    return kappa


@dataclass(frozen=True)
class Path:
    """Arc-length parameterized polyline.

    Attributes:
        points: (N, 2) vertex coordinates in metres.
    """

    points: np.ndarray
    s: np.ndarray = field(init=False, repr=False)
    curvature: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise PathError("a path needs at least two planar points")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise PathError("consecutive path points must be distinct")
        pts.setflags(write=False)
        s = np.concatenate([[0.0], np.cumsum(lengths)])
        s.setflags(write=False)
        kappa = _vertex_curvature(pts)
        kappa.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "curvature", kappa)
        object.__setattr__(self, "_seg", seg)
        object.__setattr__(self, "_seg_len", lengths)
        object.__setattr__(self, "_tangent", seg / lengths[:, None])

    def __eq__(self, other):
        return isinstance(other, Path) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def _segment(self, s: float) -> int:
        i = int(np.searchsorted(self.s, s, side="right")) - 1
        return min(max(i, 0), len(self._seg_len) - 1)

    def point_at(self, s: float) -> Tuple[float, float]:
        i = self._segment(s)
        u = (s - self.s[i]) / self._seg_len[i]
        p = self.points[i] + u * self._seg[i]
        return float(p[0]), float(p[1])

    def points_at(self, s: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`point_at`; elementwise identical to the scalar form."""
        s = np.asarray(s, dtype=float)
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self._seg_len) - 1)
        u = (s - self.s[i]) / self._seg_len[i]
        return self.points[i] + u[:, None] * self._seg[i]

    def tangents_at(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self._seg_len) - 1)
        return self._tangent[i]

    def tangent_at(self, s: float) -> Tuple[float, float]:
        t = self._tangent[self._segment(s)]
        return float(t[0]), float(t[1])

    def curvature_at(self, s: float) -> float:
        i = self._segment(s)
        u = (s - self.s[i]) / self._seg_len[i]
        return float((1.0 - u) * self.curvature[i] + u * self.curvature[i + 1])

    def project(self, x: float, y: float) -> Tuple[float, float]:
        """Closest point on the path as ``(s, distance)``."""
        d = self.distance_field(np.array([[x, y]]))
        return float(d[1][0]), float(d[0][0])

    def distance_field(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distances from each query point to the path and the arc coordinate of the foot point."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        rel = xy[:, None, :] - self.points[None, :-1, :]
        u = np.einsum("qnk,nk->qn", rel, self._seg) / (self._seg_len**2)[None, :]
        u = np.clip(u, 0.0, 1.0)
        foot = self.points[None, :-1, :] + u[..., None] * self._seg[None, :, :]
        dist = np.hypot(xy[:, None, 0] - foot[..., 0], xy[:, None, 1] - foot[..., 1])
        j = np.argmin(dist, axis=1)
        rows = np.arange(len(xy))
        return dist[rows, j], self.s[j] + u[rows, j] * self._seg_len[j]

    def as_linestring(self) -> LineString:
        return LineString(self.points)


def path_state_at(path: Path, s: float) -> Tuple[Tuple[float, float], float, float]:
    """Return ``(point, heading, curvature)`` at arc coordinate ``s``.

    Position is interpolated linearly along the segment containing ``s``;
    curvature is interpolated between the neighbouring vertex estimates.
    """
    if not 0.0 <= s <= path.length:
        raise PathError(f"s={s} outside [0, {path.length}]")
    tx, ty = path.tangent_at(s)
    return path.point_at(s), math.atan2(ty, tx), path.curvature_at(s)


def polyline_from_segments(segments: Sequence[dict], max_step: float = 1.0, arc_step_deg: float = 3.0) -> Path:
    """Build a path from ``line``/``arc`` primitives, densified for curvature estimation.

    ``{"line": [[x0, y0], [x1, y1]]}`` adds a straight run; ``{"arc": {"center": [cx, cy],
    "radius": r, "start_deg": a0, "end_deg": a1}}`` adds a circular arc. Each primitive
    continues from the end of the previous one.
    """
    pts: list = []

    def add(p):
        if not pts or math.hypot(p[0] - pts[-1][0], p[1] - pts[-1][1]) > 1e-9:
            pts.append((float(p[0]), float(p[1])))

    for seg in segments:
        if "line" in seg:
            (x0, y0), (x1, y1) = seg["line"]
            n = max(1, math.ceil(math.hypot(x1 - x0, y1 - y0) / max_step))
            for k in range(n + 1):
                add((x0 + (x1 - x0) * k / n, y0 + (y1 - y0) * k / n))
        elif "arc" in seg:
            arc = seg["arc"]
            cx, cy = arc["center"]
            r = arc["radius"]
            a0, a1 = math.radians(arc["start_deg"]), math.radians(arc["end_deg"])
            n = max(2, math.ceil(abs(math.degrees(a1 - a0)) / arc_step_deg))
            for k in range(n + 1):
                a = a0 + (a1 - a0) * k / n
                add((cx + r * math.cos(a), cy + r * math.sin(a)))
        else:
            raise PathError(f"unknown route primitive {sorted(seg)}")
    return Path(np.array(pts))


@dataclass(frozen=True)
class ConflictRegion:
    """Stretch of two paths where the actors' inflated corridors overlap."""

    actors: Tuple[str, str]
    entry: Tuple[float, float]
    exit: Tuple[float, float]
    polygon: Polygon
    degenerate: bool = False

    def for_actor(self, actor: str) -> Tuple[float, float]:
        i = self.actors.index(actor)
        return self.entry[i], self.exit[i]


def _overlap_interval(path: Path, other: Path, reach: float, sample_step: float) -> Optional[Tuple[float, float]]:
    n = max(2, math.ceil(path.length / sample_step) + 1)
    s = np.linspace(0.0, path.length, n)
    xy = path.points_at(s)
    dist, _ = other.distance_field(xy)
    inside = dist <= reach
    if not inside.any():
        return None
    idx = np.flatnonzero(inside)

    def dist_at(v):
        return other.project(*path.point_at(v))[1]

    def refine(lo, hi, want_inside_hi):
        # bisect the boundary between an outside and an inside sample
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if (dist_at(mid) <= reach) == want_inside_hi:
                hi = mid
            else:
                lo = mid
        return hi

    first, last = idx[0], idx[-1]
    entry = s[first] if first == 0 else refine(s[first - 1], s[first], True)
    exit_ = s[last] if last == n - 1 else refine(s[last + 1], s[last], True)
    return float(entry), float(exit_)


def conflict_region(
    path_a: Path,
    path_b: Path,
    width_a: float,
    width_b: float,
    actors: Tuple[str, str] = ("a", "b"),
    sample_step: float = 0.05,
) -> Optional[ConflictRegion]:
    """Overlap of two corridors, or ``None`` when they never come within reach.

    A point of ``path_a`` is in conflict when its distance to ``path_b`` is at
    most ``(width_a + width_b) / 2``, and vice versa.
    """
    if width_a <= 0 or width_b <= 0:
        raise PathError("corridor widths must be positive")
    reach = 0.5 * (width_a + width_b)
    ia = _overlap_interval(path_a, path_b, reach, sample_step)
    if ia is None:
        return None
    ib = _overlap_interval(path_b, path_a, reach, sample_step)
    if ib is None:
        return None
    poly = path_a.as_linestring().buffer(width_a / 2, cap_style="flat").intersection(
        path_b.as_linestring().buffer(width_b / 2, cap_style="flat")
    )
    if poly.is_empty or poly.area <= 0:
        poly = path_a.as_linestring().buffer(reach).intersection(path_b.as_linestring().buffer(reach))
    degenerate = path_a == path_b
    return ConflictRegion(actors=tuple(actors), entry=(ia[0], ib[0]), exit=(ia[1], ib[1]), polygon=poly, degenerate=degenerate)
