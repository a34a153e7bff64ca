from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scenario_explorer.geometry import Path
from scenario_explorer.scenarios import ActorSpec
from scenario_explorer.simulator import ActorTrack, SimulationTrace, read_trace_csv

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_trace(dt, tracks, specs, termination="horizon", collision=None):
    """Build a trace from ``{id: (x, y, s, v[, present])}`` arrays."""
    n = len(next(iter(tracks.values()))[0])
    actors = {}
    for aid, cols in tracks.items():
        x, y, s, v = (np.asarray(c, dtype=float) for c in cols[:4])
        present = np.asarray(cols[4], dtype=bool) if len(cols) > 4 else np.ones(n, dtype=bool)
        actors[aid] = ActorTrack(x, y, s, v, present)
    return SimulationTrace(dt, np.arange(n) * dt, actors, specs, termination, collision)


def trace_from_csv(text, specs, dt, termination="horizon", collision=None):
    """Rebuild a trace from its CSV dump; rows missing for an actor mark it absent."""
    cols = read_trace_csv(text)
    n = 1 + max(int(round(c["t"][-1] / dt)) for c in cols.values())
    tracks = {}
    for aid, c in cols.items():
        k = np.rint(c["t"] / dt).astype(int)
        arrays = [np.zeros(n) for _ in range(4)]
        for arr, name in zip(arrays, ("x", "y", "s", "v")):
            arr[k] = c[name]
        present = np.zeros(n, dtype=bool)
        present[k] = True
        tracks[aid] = (*arrays, present)
    return make_trace(dt, tracks, specs, termination, collision)


def straight_actor(aid, start, end, kind="vehicle", radius=1.0, max_accel=3.0, **kw):
    return ActorSpec(aid, kind, Path(np.array([start, end], dtype=float)), "scripted", footprint_radius=radius, max_accel=max_accel, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
