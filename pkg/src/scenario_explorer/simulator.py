"""Deterministic fixed-step closed-loop traffic simulation.

Scripted actors replay their route at a ramped speed profile. The ego is
driven by a curvature-aware Intelligent Driver Model: every relevant actor
projected onto the ego path, plus one virtual object derived from the path
curvature ahead, is a candidate lead, and the most demanding one binds.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import Path
from .scenarios import ActorSpec, ConcreteScenario

EMERGENCY_DECEL = 8.0
CORRIDOR_HALF_WIDTH = 1.75
_ACTIVATION_TOL = 1e-9
_CURVATURE_RTOL = 1e-6


@dataclass(frozen=True)
class IdmParams:
    v0: float = 10.0
    T: float = 1.5
    a: float = 1.5
    b: float = 2.0
    delta: float = 4.0
    s0: float = 2.0
    a_lat_max: float = 2.5
    lookahead: float = 50.0

    def __post_init__(self):
        for name in ("v0", "T", "a", "b", "s0", "a_lat_max", "lookahead"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")
        if self.delta < 1:
            raise ValueError("IDM exponent delta must be >= 1")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    horizon: float = 60.0
    idm: IdmParams = field(default_factory=IdmParams)
    emergency_decel: float = EMERGENCY_DECEL
    corridor_half_width: float = CORRIDOR_HALF_WIDTH

    def __post_init__(self):
        if not (self.dt > 0 and self.horizon > 0):
            raise ValueError("dt and horizon must be positive")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class ActorState:
    s: float
    v: float
    active: bool = False
    arrived: bool = False


@dataclass(frozen=True)
class VirtualObject:
    """A lead candidate on the ego path.

    ``speed`` is the object's velocity component along the ego path tangent;
    for a curvature limit it is the admissible cornering speed.
    """

    gap: float
    speed: float
    kind: str  # "real-actor" | "curvature-limit"
    source: Optional[str] = None

    def relative_speed(self, v_ego: float) -> float:
        return v_ego - self.speed


def idm_acceleration(v: float, gap: Optional[float], dv: float, p: IdmParams, emergency_decel: float = EMERGENCY_DECEL) -> float:
    """IDM acceleration; ``gap=None`` selects the free-road form."""
    free = p.a * (1.0 - (v / p.v0) ** p.delta)
    if gap is None:
        return max(free, -emergency_decel)
    if gap <= 0.0:
        return -emergency_decel
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a * p.b)))
    return max(free - p.a * (s_star / gap) ** 2, -emergency_decel)


def _equilibrium_gap(v: float, p: IdmParams) -> float:
    # IDM steady-state spacing behind a lead travelling at v
    return (p.s0 + v * p.T) / math.sqrt(1.0 - (v / p.v0) ** p.delta)


def object_acceleration(v: float, obj: VirtualObject, p: IdmParams, emergency_decel: float = EMERGENCY_DECEL) -> float:
    gap = obj.gap
    if obj.kind == "curvature-limit":
        # the limit point sits one equilibrium spacing behind the virtual lead,
        # so the ego settles at v_lim exactly when it reaches the curve
        gap = gap + _equilibrium_gap(obj.speed, p)
    return idm_acceleration(v, gap, v - obj.speed, p, emergency_decel)


def curvature_virtual_object(route: Path, s: float, p: IdmParams) -> Optional[VirtualObject]:
    """Velocity limit from the sharpest curvature within the lookahead window."""
    hi = min(s + p.lookahead, route.length)
    i0 = bisect.bisect_right(route.s, s)
    i1 = bisect.bisect_right(route.s, hi)
    best_k, best_gap = route.curvature_at(s), 0.0
    if i1 > i0:
        window = route.curvature[i0:i1]
        k = float(window.max())
        if k > best_k * (1.0 + _CURVATURE_RTOL):
            # vertices of one arc differ only by rounding; the nearest of them binds
            j = int(np.argmax(window >= k * (1.0 - _CURVATURE_RTOL)))
            best_k, best_gap = k, float(route.s[i0 + j] - s)
    if best_k <= 1e-9:
        return None
    v_lim = math.sqrt(p.a_lat_max / best_k)
    if v_lim >= p.v0:
        return None
    return VirtualObject(gap=best_gap, speed=v_lim, kind="curvature-limit")


class _RouteIndex:
    """Flat segment arrays for fast elementwise projection onto a path."""

    def __init__(self, path: Path):
        pts = path.points
        self.path = path
        self.ax, self.ay = pts[:-1, 0], pts[:-1, 1]
        self.dx, self.dy = np.diff(pts[:, 0]), np.diff(pts[:, 1])
        self.len2 = self.dx**2 + self.dy**2
        self.seg_len = np.sqrt(self.len2)
        self.s = path.s[:-1]
        self.tx, self.ty = self.dx / self.seg_len, self.dy / self.seg_len

    def project(self, x: np.ndarray, y: np.ndarray):
        """Vectorized over query points: ``(s, distance, tangent_x, tangent_y)``."""
        x = np.asarray(x, dtype=float)[:, None]
        y = np.asarray(y, dtype=float)[:, None]
        rx, ry = x - self.ax, y - self.ay
        u = np.clip((rx * self.dx + ry * self.dy) / self.len2, 0.0, 1.0)
        ex, ey = rx - u * self.dx, ry - u * self.dy
        d2 = ex * ex + ey * ey
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(j))
        return (
            self.s[j] + u[rows, j] * self.seg_len[j],
            np.sqrt(d2[rows, j]),
            self.tx[j],
            self.ty[j],
        )


def _advance_scripted(spec: ActorSpec, st: ActorState, t: float, dt: float) -> ActorState:
    if st.arrived:
        return st
    if t + _ACTIVATION_TOL < spec.start_delay:
        return replace(st, active=False)
    v = min(spec.target_speed, st.v + spec.ramp_accel * dt)
    s = st.s + v * dt
    length = spec.route.length
    if s >= length:
        return ActorState(length, v, active=False, arrived=True)
    return ActorState(s, v, active=True)


def _advance_ego(spec: ActorSpec, st: ActorState, accel: float, dt: float) -> ActorState:
    if st.arrived:
        return st
    v = max(0.0, st.v + accel * dt)
    s = st.s + v * dt
    length = spec.route.length
    if s >= length:
        return ActorState(length, v, active=False, arrived=True)
    return ActorState(s, v, active=True)


def _object_from_projection(
    ego_s: float, ego_r: float, spec: ActorSpec, s_proj: float, dist: float, along: float, half_width: float
) -> Optional[VirtualObject]:
    if dist - spec.footprint_radius > half_width or s_proj <= ego_s:
        return None
    gap = max(0.0, s_proj - ego_s - ego_r - spec.footprint_radius)
    return VirtualObject(gap=gap, speed=along, kind="real-actor", source=spec.id)


def filter_objects(
    ego: ActorState,
    ego_spec: ActorSpec,
    actors: Sequence[Tuple[ActorSpec, ActorState]],
    half_width: float = CORRIDOR_HALF_WIDTH,
) -> List[VirtualObject]:
    """Project active actors inside the ego corridor and ahead of the ego onto its path."""
    route = _RouteIndex(ego_spec.route)
    out = []
    for spec, st in actors:
        if not st.active or st.arrived or spec.id == ego_spec.id:
            continue
        x, y = spec.route.point_at(st.s)
        s_proj, dist, tx, ty = (float(a[0]) for a in route.project([x], [y]))
        ax, ay = spec.route.tangent_at(st.s)
        along = st.v * (ax * tx + ay * ty)
        obj = _object_from_projection(ego.s, ego_spec.footprint_radius, spec, s_proj, dist, along, half_width)
        if obj is not None:
            out.append(obj)
    return out


def ego_acceleration(v: float, objects: Sequence[VirtualObject], p: IdmParams, emergency_decel: float = EMERGENCY_DECEL) -> float:
    """Minimum over all candidate leads; free road when there are none."""
    acc = idm_acceleration(v, None, 0.0, p, emergency_decel)
    for obj in objects:
        acc = min(acc, object_acceleration(v, obj, p, emergency_decel))
    return acc


@dataclass(frozen=True)
class SimState:
    scenario: ConcreteScenario
    k: int
    states: Mapping[str, ActorState]

    @property
    def finished(self) -> bool:
        return all(st.arrived for st in self.states.values())


def initial_state(scenario: ConcreteScenario) -> SimState:
    states = {}
    for a in scenario.actors:
        if a.behavior == "idm_controlled":
            states[a.id] = ActorState(a.start_s, a.initial_speed, active=True)
        else:
            states[a.id] = ActorState(a.start_s, a.initial_speed, active=a.start_delay <= _ACTIVATION_TOL)
    return SimState(scenario, 0, states)


def _ego_params(scenario: ConcreteScenario, cfg: SimConfig) -> IdmParams:
    return replace(cfg.idm, v0=scenario.ego.target_speed)


def step(state: SimState, cfg: SimConfig) -> SimState:
    """Advance one time step; a finished state is returned unchanged."""
    if state.finished:
        return state
    sc = state.scenario
    dt = cfg.dt
    t = state.k * dt
    ego = sc.ego
    p = _ego_params(sc, cfg)
    ego_st = state.states[ego.id]
    new = {}
    if not ego_st.arrived:
        others = [(a, state.states[a.id]) for a in sc.actors if a.id != ego.id]
        objs = filter_objects(ego_st, ego, others, cfg.corridor_half_width)
        curve = curvature_virtual_object(ego.route, ego_st.s, p)
        if curve is not None:
            objs.append(curve)
        new[ego.id] = _advance_ego(ego, ego_st, ego_acceleration(ego_st.v, objs, p, cfg.emergency_decel), dt)
    else:
        new[ego.id] = ego_st
    for a in sc.actors:
        if a.id != ego.id:
            new[a.id] = _advance_scripted(a, state.states[a.id], t, dt)
    return SimState(sc, state.k + 1, new)


@dataclass
class ActorTrack:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    v: np.ndarray
    present: np.ndarray


@dataclass
class SimulationTrace:
    """Per-actor time series on a common clock ``t[k] = k * dt``.

    An actor is ``present`` from the first sample up to and including the
    sample at which it reaches the end of its route.
    """

    dt: float
    t: np.ndarray
    actors: Dict[str, ActorTrack]
    specs: Dict[str, ActorSpec]
    termination: str  # "horizon" | "all-arrived" | "collision"
    collision: Optional[Tuple[str, str]] = None

    def __len__(self) -> int:
        return len(self.t)

    def position(self, actor: str) -> np.ndarray:
        tr = self.actors[actor]
        return np.column_stack([tr.x, tr.y])

    def rows(self):
        for k, t in enumerate(self.t):
            for aid, tr in self.actors.items():
                if tr.present[k]:
                    yield t, aid, tr.x[k], tr.y[k], tr.s[k], tr.v[k]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,actor,x,y,s,v\n")
        for t, aid, x, y, s, v in self.rows():
            buf.write(f"{t:.6f},{aid},{x:.6f},{y:.6f},{s:.6f},{v:.6f}\n")
        return buf.getvalue()


def read_trace_csv(text: str) -> Dict[str, Dict[str, np.ndarray]]:
    """Parse a trace CSV into per-actor column arrays."""
    cols: Dict[str, Dict[str, list]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        d = cols.setdefault(row["actor"], {k: [] for k in ("t", "x", "y", "s", "v")})
        for k in d:
            d[k].append(float(row[k]))
    return {a: {k: np.array(v) for k, v in d.items()} for a, d in cols.items()}


def _scripted_track(spec: ActorSpec, n: int, dt: float):
    s = np.empty(n + 1)
    v = np.empty(n + 1)
    active = np.zeros(n + 1, dtype=bool)
    arrived_at = None
    st = ActorState(spec.start_s, spec.initial_speed, active=spec.start_delay <= _ACTIVATION_TOL)
    s[0], v[0], active[0] = st.s, st.v, st.active
    for k in range(n):
        st = _advance_scripted(spec, st, k * dt, dt)
        s[k + 1], v[k + 1], active[k + 1] = st.s, st.v, st.active
        if st.arrived:
            arrived_at = k + 1
            s[k + 2 :] = st.s
            v[k + 2 :] = 0.0
            break
    return s, v, active, arrived_at


def simulate(scenario: ConcreteScenario, cfg: SimConfig = SimConfig()) -> SimulationTrace:
    """Run one concrete scenario to horizon, full arrival, or an ego collision.

    Produces exactly the same states as repeated :func:`step` calls; scripted
    tracks are computed up front because they do not react to anything.
    """
    dt, n = cfg.dt, cfg.steps
    ego = scenario.ego
    p = _ego_params(scenario, cfg)
    route = _RouteIndex(ego.route)
    others = [a for a in scenario.actors if a.id != ego.id]

    pre = {}
    for a in others:
        s, v, active, arrived_at = _scripted_track(a, n, dt)
        last = n if arrived_at is None else arrived_at
        pts = a.route.points_at(s[: last + 1])
        tan = a.route.tangents_at(s[: last + 1])
        s_proj, dist, tx, ty = route.project(pts[:, 0], pts[:, 1])
        along = v[: last + 1] * (tan[:, 0] * tx + tan[:, 1] * ty)
        pre[a.id] = dict(s=s, v=v, active=active, arrived_at=arrived_at, last=last, xy=pts, s_proj=s_proj, dist=dist, along=along)

    ego_s = np.empty(n + 1)
    ego_v = np.empty(n + 1)
    ego_st = ActorState(ego.start_s, ego.initial_speed, active=True)
    ego_s[0], ego_v[0] = ego_st.s, ego_st.v
    ego_arrived_at = None
    termination, collision, end = "horizon", None, n
    r_e = ego.footprint_radius
    half = cfg.corridor_half_width

    def collides(k: int, ex: float, ey: float) -> Optional[str]:
        for a in others:
            d = pre[a.id]
            if k > d["last"]:
                continue
            x, y = d["xy"][k]
            if math.hypot(ex - x, ey - y) < r_e + a.footprint_radius:
                return a.id
        return None

    ex, ey = ego.route.point_at(ego_st.s)
    hit = collides(0, ex, ey)
    if hit is not None:
        termination, collision, end = "collision", (ego.id, hit), 0
    else:
        for k in range(n):
            if ego_arrived_at is None:
                objs = []
                for a in others:
                    d = pre[a.id]
                    if k > d["last"] or not d["active"][k]:
                        continue
                    obj = _object_from_projection(
                        ego_st.s, r_e, a, float(d["s_proj"][k]), float(d["dist"][k]), float(d["along"][k]), half
                    )
                    if obj is not None:
                        objs.append(obj)
                curve = curvature_virtual_object(ego.route, ego_st.s, p)
                if curve is not None:
                    objs.append(curve)
                ego_st = _advance_ego(ego, ego_st, ego_acceleration(ego_st.v, objs, p, cfg.emergency_decel), dt)
                if ego_st.arrived:
                    ego_arrived_at = k + 1
            ego_s[k + 1] = ego_st.s
            ego_v[k + 1] = ego_st.v if ego_arrived_at is None or ego_arrived_at == k + 1 else 0.0
            if ego_arrived_at is None or ego_arrived_at == k + 1:
                ex, ey = ego.route.point_at(ego_st.s)
                hit = collides(k + 1, ex, ey)
                if hit is not None:
                    termination, collision, end = "collision", (ego.id, hit), k + 1
                    break
            if ego_arrived_at is not None and all(pre[a.id]["arrived_at"] is not None and pre[a.id]["arrived_at"] <= k + 1 for a in others):
                termination, end = "all-arrived", k + 1
                break

    t = np.arange(end + 1) * dt
    tracks: Dict[str, ActorTrack] = {}

    def present(arrived_at):
        pr = np.ones(end + 1, dtype=bool)
        if arrived_at is not None and arrived_at < end:
            pr[arrived_at + 1 :] = False
        return pr

    exy = ego.route.points_at(ego_s[: end + 1])
    tracks[ego.id] = ActorTrack(exy[:, 0], exy[:, 1], ego_s[: end + 1].copy(), ego_v[: end + 1].copy(), present(ego_arrived_at))
    for a in others:
        d = pre[a.id]
        m = min(end, d["last"])
        xy = np.empty((end + 1, 2))
        xy[: m + 1] = d["xy"][: m + 1]
        xy[m + 1 :] = d["xy"][m]
        tracks[a.id] = ActorTrack(xy[:, 0], xy[:, 1], d["s"][: end + 1].copy(), d["v"][: end + 1].copy(), present(d["arrived_at"]))
    order = [ego.id] + [a.id for a in others]
    tracks = {aid: tracks[aid] for aid in [a.id for a in scenario.actors] if aid in order}
    return SimulationTrace(dt, t, tracks, {a.id: a for a in scenario.actors}, termination, collision)
