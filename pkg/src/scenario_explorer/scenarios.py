"""Logical scenarios, parameter lattices and concrete-scenario instantiation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from .geometry import ConflictRegion, Path, conflict_region, polyline_from_segments

LIBRARY_VERSION = 1
ACTOR_KINDS = ("ego", "pedestrian", "vehicle", "truck")
BEHAVIORS = ("idm_controlled", "scripted")
BINDABLE_FIELDS = ("start_s", "start_delay", "target_speed", "initial_speed")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterDim:
    """One axis of a parameter lattice with inclusive endpoints."""

    name: str
    min: float
    max: float
    samples: int

    def __post_init__(self):
        if int(self.samples) != self.samples or self.samples < 1:
            raise ScenarioError(f"{self.name}: samples must be a positive integer")
        if self.samples >= 2 and not self.max > self.min:
            raise ScenarioError(f"{self.name}: max must exceed min when samples >= 2")
        if self.samples == 1 and self.max != self.min:
            raise ScenarioError(f"{self.name}: a single-sample dim needs min == max")

    @property
    def step(self) -> float:
        return 0.0 if self.samples == 1 else (self.max - self.min) / (self.samples - 1)

    def value(self, k: int) -> float:
        if not 0 <= k < self.samples:
            raise IndexError(f"{self.name}: index {k} outside [0, {self.samples - 1}]")
        if k == self.samples - 1:
            return float(self.max)
        return self.min + k * (self.max - self.min) / (self.samples - 1)

    def nearest(self, value: float) -> int:
        if self.samples == 1:
            return 0
        k = round((value - self.min) / self.step)
        return int(min(max(k, 0), self.samples - 1))

    def neighbors(self, value: float) -> Tuple[float, float]:
        """Lattice values bracketing ``value``."""
        if self.samples == 1:
            return self.min, self.min
        k = int(math.floor((value - self.min) / self.step))
        k = min(max(k, 0), self.samples - 2)
        return self.value(k), self.value(k + 1)

    def on_lattice(self, value: float, rel_tol: float = 1e-9) -> bool:
        tol = rel_tol * max(1.0, abs(self.max - self.min))
        return abs(self.value(self.nearest(value)) - value) <= tol


@dataclass(frozen=True)
class ParameterGrid:
    """Row-major lattice over ``dims``; the first dim varies slowest.

    ``strides`` selects every k-th lattice point per dim. Index vectors handed
    to and from a strided grid are sub-lattice indices.
    """

    dims: Tuple[ParameterDim, ...]
    strides: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise ScenarioError("a grid needs at least one dim")
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ScenarioError(f"duplicate dim names in {names}")
        if self.strides is not None:
            strides = tuple(int(s) for s in self.strides)
            if len(strides) != len(self.dims) or any(s < 1 for s in strides):
                raise ScenarioError(f"invalid strides {self.strides} for {len(self.dims)} dims")
            object.__setattr__(self, "strides", strides)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    @property
    def shape(self) -> Tuple[int, ...]:
        if self.strides is None:
            return tuple(d.samples for d in self.dims)
        return tuple(-(-d.samples // s) for d, s in zip(self.dims, self.strides))

    @property
    def cardinality(self) -> int:
        return math.prod(self.shape)

    def __len__(self) -> int:
        return self.cardinality

    def dim(self, name: str) -> ParameterDim:
        for d in self.dims:
            if d.name == name:
                return d
        raise KeyError(name)

    def strided(self, strides: Sequence[int]) -> "ParameterGrid":
        return ParameterGrid(self.dims, tuple(strides))

    def _check(self, index: Sequence[int]) -> Tuple[int, ...]:
        index = tuple(int(k) for k in index)
        if len(index) != len(self.dims) or any(not 0 <= k < n for k, n in zip(index, self.shape)):
            raise IndexError(f"index {index} outside grid shape {self.shape}")
        return index

    def flat(self, index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(self._check(index), self.shape))

    def unflat(self, flat: int) -> Tuple[int, ...]:
        if not 0 <= flat < self.cardinality:
            raise IndexError(f"flat index {flat} outside [0, {self.cardinality})")
        return tuple(int(k) for k in np.unravel_index(flat, self.shape))

    def lattice_index(self, index: Sequence[int]) -> Tuple[int, ...]:
        """Index on the full (unstrided) lattice."""
        index = self._check(index)
        if self.strides is None:
            return index
        return tuple(k * s for k, s in zip(index, self.strides))

    def values(self, index: Sequence[int]) -> Tuple[float, ...]:
        return tuple(d.value(k) for d, k in zip(self.dims, self.lattice_index(index)))

    def quantize(self, values: Sequence[float]) -> Tuple[int, ...]:
        """Nearest grid index for a value vector."""
        full = [d.nearest(v) for d, v in zip(self.dims, values)]
        if self.strides is None:
            return tuple(full)
        return tuple(min(round(k / s), n - 1) for k, s, n in zip(full, self.strides, self.shape))

    def indices(self) -> Iterator[Tuple[int, ...]]:
        for flat in range(self.cardinality):
            yield self.unflat(flat)

    def normalize(self, index: Sequence[int]) -> np.ndarray:
        index = self._check(index)
        return np.array([k / (n - 1) if n > 1 else 0.0 for k, n in zip(index, self.shape)])

    def to_dict(self) -> dict:
        out = {"dims": [{"name": d.name, "min": d.min, "max": d.max, "samples": d.samples} for d in self.dims]}
        if self.strides is not None:
            out["strides"] = list(self.strides)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ParameterGrid":
        dims = [ParameterDim(d["name"], float(d["min"]), float(d["max"]), int(d["samples"])) for d in data["dims"]]
        strides = data.get("strides")
        return cls(tuple(dims), tuple(strides) if strides else None)


def build_parameter_grid(dims: Sequence[ParameterDim]) -> ParameterGrid:
    return ParameterGrid(tuple(dims))


def grid_values(grid: ParameterGrid, index: Sequence[int]) -> Tuple[float, ...]:
    return grid.values(index)


@dataclass(frozen=True)
class ActorSpec:
    id: str
    kind: str
    route: Path
    behavior: str
    start_s: float = 0.0
    start_delay: float = 0.0
    target_speed: float = 1.0
    footprint_radius: float = 1.0
    max_accel: float = 3.0
    initial_speed: float = 0.0
    ramp_accel: float = 2.0

    def __post_init__(self):
        if self.kind not in ACTOR_KINDS:
            raise ScenarioError(f"{self.id}: unknown kind {self.kind!r}")
        if self.behavior not in BEHAVIORS:
            raise ScenarioError(f"{self.id}: unknown behavior {self.behavior!r}")

    def validate(self) -> None:
        if not 0.0 <= self.start_s < self.route.length:
            raise ScenarioError(f"{self.id}: start_s={self.start_s} outside route [0, {self.route.length})")
        if self.start_delay < 0:
            raise ScenarioError(f"{self.id}: negative start_delay")
        if self.target_speed <= 0 or self.footprint_radius <= 0:
            raise ScenarioError(f"{self.id}: target_speed and footprint_radius must be positive")
        if self.initial_speed < 0 or self.ramp_accel <= 0 or self.max_accel < 0:
            raise ScenarioError(f"{self.id}: invalid speed profile")


@dataclass(frozen=True)
class Binding:
    """Maps a parameter value ``p`` onto ``actor.field = offset + scale * p``."""

    actor: str
    field: str
    scale: float = 1.0
    offset: float = 0.0

    def apply(self, value: float) -> float:
        if self.scale == 1.0 and self.offset == 0.0:
            return float(value)
        return self.offset + self.scale * value


@dataclass(frozen=True)
class LogicalScenario:
    id: str
    actors: Tuple[ActorSpec, ...]
    grid: ParameterGrid
    bindings: Mapping[str, Binding]
    fixed: Mapping[str, float] = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        ids = [a.id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate actor ids in {self.id}")
        if sum(a.kind == "ego" for a in self.actors) != 1:
            raise ScenarioError(f"{self.id}: exactly one ego actor required")
        names = set(self.grid.names) | set(self.fixed)
        if set(self.bindings) != names:
            raise ScenarioError(f"{self.id}: every dim needs exactly one binding ({sorted(names ^ set(self.bindings))})")
        for name, b in self.bindings.items():
            if b.actor not in ids:
                raise ScenarioError(f"{self.id}: binding {name} targets unknown actor {b.actor}")
            if b.field not in BINDABLE_FIELDS:
                raise ScenarioError(f"{self.id}: binding {name} targets unknown field {b.field}")

    def actor(self, actor_id: str) -> ActorSpec:
        for a in self.actors:
            if a.id == actor_id:
                return a
        raise KeyError(actor_id)

    @property
    def ego(self) -> ActorSpec:
        return next(a for a in self.actors if a.kind == "ego")

    def with_fixed(self, values: Mapping[str, float]) -> "LogicalScenario":
        """Pin dims to constants; pinned dims leave the search grid."""
        unknown = set(values) - set(self.grid.names)
        if unknown:
            raise ScenarioError(f"{self.id}: unknown dims {sorted(unknown)}")
        dims = tuple(d for d in self.grid.dims if d.name not in values)
        if not dims:
            raise ScenarioError(f"{self.id}: at least one dim must stay free")
        fixed = dict(self.fixed)
        fixed.update({k: float(v) for k, v in values.items()})
        return replace(self, grid=ParameterGrid(dims, None), fixed=fixed)

    def conflict_regions(self) -> Dict[Tuple[str, str], ConflictRegion]:
        return _regions_for(self.actors)


@lru_cache(maxsize=64)
def _regions_cached(key: Tuple[Tuple[str, Path, float], ...]) -> Dict[Tuple[str, str], ConflictRegion]:
    out = {}
    for i, (ida, pa, ra) in enumerate(key):
        for idb, pb, rb in key[i + 1 :]:
            region = conflict_region(pa, pb, 2 * ra, 2 * rb, actors=(ida, idb))
            if region is not None:
                out[(ida, idb)] = region
                out[(idb, ida)] = ConflictRegion(
                    actors=(idb, ida),
                    entry=region.entry[::-1],
                    exit=region.exit[::-1],
                    polygon=region.polygon,
                    degenerate=region.degenerate,
                )
    return out


def _regions_for(actors: Sequence[ActorSpec]) -> Dict[Tuple[str, str], ConflictRegion]:
    """Conflict regions for every actor pair, keyed both ways round."""
    return _regions_cached(tuple((a.id, a.route, a.footprint_radius) for a in actors))


@dataclass(frozen=True)
class ConcreteScenario:
    logical_id: str
    actors: Tuple[ActorSpec, ...]
    index: Tuple[int, ...]
    values: Mapping[str, float]

    def actor(self, actor_id: str) -> ActorSpec:
        for a in self.actors:
            if a.id == actor_id:
                return a
        raise KeyError(actor_id)

    @property
    def ego(self) -> ActorSpec:
        return next(a for a in self.actors if a.kind == "ego")

    def conflict_regions(self) -> Dict[Tuple[str, str], ConflictRegion]:
        return _regions_for(self.actors)


def instantiate_values(logical: LogicalScenario, values: Mapping[str, float], index: Tuple[int, ...] = ()) -> ConcreteScenario:
    """Bind explicit parameter values (free and pinned) onto the actor templates."""
    merged = dict(logical.fixed)
    merged.update(values)
    missing = set(logical.bindings) - set(merged)
    if missing:
        raise ScenarioError(f"unbound parameters {sorted(missing)}")
    updates: Dict[str, dict] = {}
    for name, value in merged.items():
        b = logical.bindings[name]
        updates.setdefault(b.actor, {})[b.field] = b.apply(value)
    actors = tuple(replace(a, **updates[a.id]) if a.id in updates else a for a in logical.actors)
    for a in actors:
        a.validate()
    return ConcreteScenario(logical.id, actors, tuple(index), merged)


def instantiate(logical: LogicalScenario, index: Sequence[int]) -> ConcreteScenario:
    vals = logical.grid.values(index)
    return instantiate_values(logical, dict(zip(logical.grid.names, vals)), tuple(int(k) for k in index))


def _parse_actor(doc: Mapping) -> ActorSpec:
    route = doc["route"]
    if "points" in route:
        path = Path(np.asarray(route["points"], dtype=float))
    else:
        path = polyline_from_segments(route["segments"], **route.get("sampling", {}))
    kw = {k: doc[k] for k in ("start_s", "start_delay", "target_speed", "footprint_radius", "max_accel", "initial_speed", "ramp_accel") if k in doc}
    return ActorSpec(id=doc["id"], kind=doc["kind"], route=path, behavior=doc["behavior"], **{k: float(v) for k, v in kw.items()})


def parse_logical_scenario(doc: Mapping) -> LogicalScenario:
    actors = tuple(_parse_actor(a) for a in doc["actors"])
    dims = tuple(ParameterDim(d["name"], float(d["min"]), float(d["max"]), int(d["samples"])) for d in doc["grid"])
    bindings = {
        name: Binding(b["actor"], b["field"], float(b.get("scale", 1.0)), float(b.get("offset", 0.0)))
        for name, b in doc["bindings"].items()
    }
    logical = LogicalScenario(doc["id"], actors, ParameterGrid(dims), bindings, description=doc.get("description", ""))
    return logical


def load_library(text: str) -> Dict[str, LogicalScenario]:
    out = {}
    for doc in yaml.safe_load_all(text):
        if not doc:
            continue
        if doc.get("version", LIBRARY_VERSION) != LIBRARY_VERSION:
            raise ScenarioError(f"unsupported scenario library version {doc.get('version')}")
        out[doc["id"]] = parse_logical_scenario(doc)
    return out


@lru_cache(maxsize=1)
def _bundled() -> Dict[str, LogicalScenario]:
    text = resources.files("scenario_explorer").joinpath("data/scenarios.yaml").read_text()
    return load_library(text)


def load_scenario_library(scenario_id: str) -> LogicalScenario:
    lib = _bundled()
    if scenario_id not in lib:
        raise ScenarioError(f"unknown scenario {scenario_id!r}; available: {sorted(lib)}")
    return lib[scenario_id]
