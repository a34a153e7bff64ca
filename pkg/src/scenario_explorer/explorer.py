"""Run orchestration: config parsing, exploration, exhaustive oracle, replay and heatmaps.

Every record file is JSON lines: a header object describing the searched grid,
then one object per simulated scenario. ``explore`` and ``grid_oracle`` share
the record schema so their outputs feed the same heatmap exporter.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path as FsPath
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from . import optimizer
from .metrics import MetricError, MetricKind, MetricResult, evaluate, evaluate_all
from .scenarios import LogicalScenario, ParameterGrid, ScenarioError, instantiate_values, load_scenario_library
from .simulator import SimConfig, SimulationTrace, simulate

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
OUTPUT_DIR_ENV = "SCENEX_OUTPUT_DIR"
RECORDS_FILE = "records.jsonl"
REPORT_FILE = "report.json"
ORACLE_FILE = "oracle.jsonl"

_CONFIG_KEYS = {"version", "scenario", "metric", "pair", "fixed", "strides", "budget", "init_count", "seed", "dt", "horizon", "output_dir"}


class ConfigError(ValueError):
    pass


def _dim_name(name: str) -> str:
    return str(name).replace("-", "_")


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    metric: MetricKind
    pair: Tuple[str, str] = ("ego", "pedestrian")
    fixed: Mapping[str, float] = field(default_factory=dict)
    strides: Optional[Tuple[int, ...]] = None
    budget: int = 430
    init_count: int = 8
    seed: int = 0
    dt: float = 0.05
    horizon: float = 60.0
    output_dir: str = "runs"
    version: int = CONFIG_VERSION

    def logical(self) -> LogicalScenario:
        base = load_scenario_library(self.scenario)
        return base.with_fixed(self.fixed) if self.fixed else base

    def grid(self) -> ParameterGrid:
        g = self.logical().grid
        return g.strided(self.strides) if self.strides else g

    def sim_config(self) -> SimConfig:
        return SimConfig(dt=self.dt, horizon=self.horizon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = self.metric.value
        d["pair"] = list(self.pair)
        d["fixed"] = dict(sorted(self.fixed.items()))
        d["strides"] = list(self.strides) if self.strides else None
        return d


def _resolve_strides(base: LogicalScenario, fixed: Mapping[str, float], strides: Sequence[int]) -> Tuple[int, ...]:
    """Strides may be listed for the free dims only or for every dim of the scenario."""
    strides = tuple(int(s) for s in strides)
    free = [n for n in base.grid.names if n not in fixed]
    if len(strides) == len(base.grid.names) and len(strides) != len(free):
        strides = tuple(s for n, s in zip(base.grid.names, strides) if n not in fixed)
    if len(strides) != len(free) or any(s < 1 for s in strides):
        raise ConfigError(f"strides {list(strides)} do not match free dims {free}")
    return strides


def config_from_dict(data: Mapping, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')}")
    for key in ("scenario", "metric"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    try:
        metric = MetricKind(str(data["metric"]))
    except ValueError:
        raise ConfigError(f"unknown metric {data['metric']!r}; choose from {[m.value for m in MetricKind]}") from None
    try:
        base = load_scenario_library(str(data["scenario"]))
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from None

    pair = tuple(data.get("pair", ("ego", "pedestrian")))
    ids = {a.id for a in base.actors}
    if len(pair) != 2 or pair[0] == pair[1] or not set(pair) <= ids:
        raise ConfigError(f"pair {list(pair)} must name two distinct actors of {sorted(ids)}")

    fixed = {}
    for name, value in (data.get("fixed") or {}).items():
        name = _dim_name(name)
        if name not in base.grid.names:
            raise ConfigError(f"fixed override names unknown dim {name!r}; dims are {list(base.grid.names)}")
        d = base.grid.dim(name)
        value = float(value)
        if not d.min <= value <= d.max:
            raise ConfigError(f"fixed {name}={value} outside [{d.min}, {d.max}]; nearest lattice value {d.value(d.nearest(value))}")
        fixed[name] = value
    if len(fixed) == len(base.grid.names):
        raise ConfigError("at least one dim must stay free")

    strides = data.get("strides")
    if strides is not None:
        strides = _resolve_strides(base, fixed, strides)

    try:
        cfg = RunConfig(
            scenario=str(data["scenario"]),
            metric=metric,
            pair=(str(pair[0]), str(pair[1])),
            fixed=fixed,
            strides=strides,
            budget=int(data.get("budget", 430)),
            init_count=int(data.get("init_count", 8)),
            seed=int(data.get("seed", 0)),
            dt=float(data.get("dt", 0.05)),
            horizon=float(data.get("horizon", 60.0)),
            output_dir=str(data.get("output_dir", "runs")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from None
    if not cfg.budget >= cfg.init_count >= 1:
        raise ConfigError(f"need budget >= init_count >= 1 (got {cfg.budget}, {cfg.init_count})")
    if not (cfg.dt > 0 and cfg.horizon > 0):
        raise ConfigError("dt and horizon must be positive")
    env = os.environ if env is None else env
    if env.get(OUTPUT_DIR_ENV):
        cfg = replace(cfg, output_dir=env[OUTPUT_DIR_ENV])
    return cfg


def parse_config(source: Union[str, os.PathLike], env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Load a YAML run config from a file path."""
    try:
        text = FsPath(source).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {source}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {source}: {exc}") from None
    return config_from_dict(data, env)


@dataclass(frozen=True)
class Record:
    iteration: int
    index: Tuple[int, ...]
    lattice_index: Tuple[int, ...]
    values: Mapping[str, float]
    value: float
    capped: bool
    wall_time: float
    error: Optional[str] = None

    def to_dict(self, wall_time: bool = True) -> dict:
        d = {
            "iteration": self.iteration,
            "index": list(self.index),
            "lattice_index": list(self.lattice_index),
            "values": dict(self.values),
            "value": self.value,
            "capped": self.capped,
        }
        if wall_time:
            d["wall_time"] = self.wall_time
        if self.error is not None:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Record":
        return cls(
            int(d["iteration"]),
            tuple(d["index"]),
            tuple(d["lattice_index"]),
            dict(d["values"]),
            float(d["value"]),
            bool(d["capped"]),
            float(d.get("wall_time", 0.0)),
            d.get("error"),
        )


class ScenarioObjective:
    """Index on the search grid -> metric value, remembering the full result of each call."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.logical = cfg.logical()
        self.grid = cfg.grid()
        self.sim_cfg = cfg.sim_config()
        self.cap = cfg.metric.default_cap
        self.last: Optional[Tuple[MetricResult, float]] = None

    def values_at(self, index: Sequence[int]) -> Dict[str, float]:
        return dict(zip(self.grid.names, self.grid.values(index)))

    def run_values(self, values: Mapping[str, float], index: Tuple[int, ...] = ()) -> SimulationTrace:
        return simulate(instantiate_values(self.logical, values, index), self.sim_cfg)

    def __call__(self, index: Sequence[int]) -> float:
        self.last = None
        t0 = time.perf_counter()
        scenario = instantiate_values(self.logical, self.values_at(index), tuple(index))
        trace = simulate(scenario, self.sim_cfg)
        result = evaluate(self.cfg.metric, trace, self.cfg.pair, scenario.conflict_regions())
        self.last = (result, time.perf_counter() - t0)
        return result.value

    def record(self, iteration: int, index: Sequence[int]) -> Record:
        """Evaluate ``index`` and wrap the outcome; failures become capped records."""
        index = tuple(int(k) for k in index)
        values = self.values_at(index)
        error = None
        try:
            self(index)
            result, wall = self.last
            value, capped = result.value, result.capped
        except (ScenarioError, MetricError, ValueError, ArithmeticError) as exc:
            log.warning("evaluation failed at %s: %s", index, exc)
            value, capped, wall, error = self.cap, True, 0.0, str(exc)
        return Record(iteration, index, self.grid.lattice_index(index), values, value, capped, wall, error)


def _header(cfg: RunConfig, grid: ParameterGrid, kind: str) -> dict:
    return {"type": "header", "kind": kind, "config": cfg.to_dict(), "grid": grid.to_dict(), "metric": cfg.metric.value}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


@dataclass
class ExplorationReport:
    config: RunConfig
    grid: ParameterGrid
    history: List[Record]
    kernels: List[optimizer.KernelConfig] = field(default_factory=list)

    @property
    def incumbent(self) -> Record:
        return min(self.history, key=lambda r: (r.value, r.iteration))

    def to_dict(self) -> dict:
        """Report content without wall times, so equal seeds give equal bytes."""
        inc = self.incumbent
        return {
            "config": self.config.to_dict(),
            "grid": self.grid.to_dict(),
            "history": [r.to_dict(wall_time=False) for r in self.history],
            "incumbent": inc.to_dict(wall_time=False),
            "totals": {
                "evaluations": len(self.history),
                "capped": sum(r.capped for r in self.history),
                "failed": sum(r.error is not None for r in self.history),
                "grid_cardinality": self.grid.cardinality,
                "kernel_configs": [{"length_scale": float(k.length_scale), "noise_var": k.noise_var} for k in self.kernels],
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def explore(cfg: RunConfig, output_dir: Optional[Union[str, os.PathLike]] = None) -> ExplorationReport:
    """Bayesian exploration of the configured grid; records stream to disk as they arrive."""
    objective = ScenarioObjective(cfg)
    grid = objective.grid
    if cfg.budget > grid.cardinality:
        raise ConfigError(f"budget {cfg.budget} exceeds grid cardinality {grid.cardinality}")
    out = FsPath(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    history: List[Record] = []
    kernels: List[optimizer.KernelConfig] = []

    with open(out / RECORDS_FILE, "w") as fh:
        fh.write(_dumps(_header(cfg, grid, "explore")) + "\n")
        fh.flush()

        def tracked(index):
            rec = objective.record(len(history), index)
            history.append(rec)
            fh.write(_dumps({"type": "record", **rec.to_dict()}) + "\n")
            fh.flush()
            return rec.value

        result = optimizer.run(tracked, grid, cfg.budget, cfg.init_count, cfg.seed)
        kernels = result.configs

    report = ExplorationReport(cfg, grid, history, kernels)
    (out / REPORT_FILE).write_text(report.to_json())
    return report


@dataclass
class OracleTable:
    config: RunConfig
    grid: ParameterGrid
    records: List[Record]

    def array(self) -> np.ndarray:
        return np.array([r.value for r in self.records]).reshape(self.grid.shape)

    def quantile(self, q: float) -> float:
        return float(np.quantile([r.value for r in self.records], q))


def grid_oracle(cfg: RunConfig, strides: Optional[Sequence[int]] = None, output_dir: Optional[Union[str, os.PathLike]] = None, write: bool = True) -> OracleTable:
    """Simulate every cell of the (strided) grid in row-major lattice order."""
    if strides is not None:
        strides = _resolve_strides(load_scenario_library(cfg.scenario), cfg.fixed, strides)
        cfg = replace(cfg, strides=strides)
    objective = ScenarioObjective(cfg)
    grid = objective.grid
    records = [objective.record(flat, grid.unflat(flat)) for flat in range(grid.cardinality)]
    if write:
        out = FsPath(output_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / ORACLE_FILE, "w") as fh:
            fh.write(_dumps(_header(cfg, grid, "oracle")) + "\n")
            for rec in records:
                fh.write(_dumps({"type": "record", **rec.to_dict()}) + "\n")
    return OracleTable(cfg, grid, records)


@dataclass
class ReplayResult:
    values: Dict[str, float]
    trace: SimulationTrace
    metrics: Dict[str, MetricResult]
    csv_path: Optional[FsPath] = None

    def breakdown(self) -> dict:
        return {
            "values": self.values,
            "termination": self.trace.termination,
            "collision": list(self.trace.collision) if self.trace.collision else None,
            "metrics": {k: m.to_dict() for k, m in self.metrics.items()},
        }


def _on_lattice_values(grid: ParameterGrid, values: Sequence[float]) -> Dict[str, float]:
    if len(values) != len(grid.dims):
        raise ConfigError(f"expected {len(grid.dims)} values for dims {list(grid.names)}, got {len(values)}")
    out = {}
    for d, v in zip(grid.dims, values):
        v = float(v)
        if not d.min <= v <= d.max:
            raise ConfigError(f"{d.name}={v} outside [{d.min}, {d.max}]")
        if not d.on_lattice(v):
            lo, hi = d.neighbors(v)
            raise ConfigError(f"{d.name}={v} is not on the lattice; neighbors are {lo!r} and {hi!r}")
        out[d.name] = d.value(d.nearest(v))
    return out


def replay(
    cfg: RunConfig,
    values: Optional[Sequence[float]] = None,
    index: Optional[Sequence[int]] = None,
    output_dir: Optional[Union[str, os.PathLike]] = None,
    write: bool = True,
) -> ReplayResult:
    """Simulate one concrete scenario and report every metric for the configured pair.

    ``values`` are given for the free dims in grid order and must lie on the
    full lattice; ``index`` addresses the (possibly strided) search grid.
    """
    objective = ScenarioObjective(cfg)
    if (values is None) == (index is None):
        raise ConfigError("give exactly one of values or index")
    if index is not None:
        index = tuple(int(k) for k in index)
        try:
            named = objective.values_at(index)
        except IndexError as exc:
            raise ConfigError(str(exc)) from None
    else:
        named = _on_lattice_values(objective.logical.grid, values)
    scenario = instantiate_values(objective.logical, named)
    trace = simulate(scenario, objective.sim_cfg)
    metrics = evaluate_all(trace, cfg.pair, scenario.conflict_regions())
    result = ReplayResult(named, trace, metrics)
    if write:
        out = FsPath(output_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = "replay_" + "_".join(f"{k}={v:.6g}" for k, v in named.items())
        result.csv_path = out / f"{stem}.csv"
        result.csv_path.write_text(trace.to_csv())
        (out / f"{stem}.json").write_text(json.dumps(result.breakdown(), sort_keys=True, indent=2) + "\n")
    return result


def read_records(path: Union[str, os.PathLike]) -> Tuple[dict, List[Record]]:
    header, records = None, []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("type") == "header":
                header = obj
            else:
                records.append(Record.from_dict(obj))
    if header is None:
        raise ConfigError(f"{path} has no header line")
    return header, records


def heatmap_matrix(grid: ParameterGrid, records: Sequence[Record], x: str, y: str) -> Tuple[List[float], List[float], np.ndarray]:
    """Min-reduce records onto the full-lattice (y, x) plane; NaN marks unevaluated cells."""
    names = list(grid.names)
    for n in (x, y):
        if n not in names:
            raise ConfigError(f"unknown dim {n!r}; dims are {names}")
    if x == y:
        raise ConfigError("x and y must be different dims")
    ix, iy = names.index(x), names.index(y)
    dx, dy = grid.dims[ix], grid.dims[iy]
    sx = grid.strides[ix] if grid.strides else 1
    sy = grid.strides[iy] if grid.strides else 1
    xs = list(range(0, dx.samples, sx))
    ys = list(range(0, dy.samples, sy))
    mat = np.full((len(ys), len(xs)), np.nan)
    for r in records:
        i, j = r.lattice_index[iy] // sy, r.lattice_index[ix] // sx
        if math.isnan(mat[i, j]) or r.value < mat[i, j]:
            mat[i, j] = r.value
    return [dx.value(k) for k in xs], [dy.value(k) for k in ys], mat


def export_heatmap(records_path: Union[str, os.PathLike], x: str, y: str, out_path: Optional[Union[str, os.PathLike]] = None) -> str:
    """CSV matrix with x values across and y values down; empty cells were never evaluated."""
    header, records = read_records(records_path)
    grid = ParameterGrid.from_dict(header["grid"])
    xs, ys, mat = heatmap_matrix(grid, records, _dim_name(x), _dim_name(y))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"{_dim_name(y)}\\{_dim_name(x)}"] + [f"{v:.6g}" for v in xs])
    for yv, row in zip(ys, mat):
        w.writerow([f"{yv:.6g}"] + ["" if math.isnan(v) else repr(float(v)) for v in row])
    text = buf.getvalue()
    if out_path is not None:
        FsPath(out_path).write_text(text)
    return text
