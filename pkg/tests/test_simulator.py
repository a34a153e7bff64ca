from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from scenario_explorer.geometry import Path, polyline_from_segments
from scenario_explorer.scenarios import ActorSpec, ConcreteScenario, instantiate, load_scenario_library
from scenario_explorer.simulator import (
    EMERGENCY_DECEL,
    ActorState,
    IdmParams,
    SimConfig,
    VirtualObject,
    curvature_virtual_object,
    ego_acceleration,
    filter_objects,
    idm_acceleration,
    initial_state,
    read_trace_csv,
    simulate,
    step,
)

from .conftest import straight_actor

STRAIGHT = Path(np.array([[0.0, 0.0], [100.0, 0.0]]))


def ego_spec(route=STRAIGHT, v0=10.0, v_init=0.0, start_s=0.0):
    return ActorSpec("ego", "ego", route, "idm_controlled", start_s=start_s, target_speed=v0, initial_speed=v_init)


def alone(ego):
    return ConcreteScenario("t", (ego,), (), {})


# --- IDM -----------------------------------------------------------------


def test_idm_free_road_equilibrium():
    p = IdmParams(v0=10.0)
    assert idm_acceleration(10.0, None, 0.0, p) == 0.0


def test_idm_full_acceleration_from_rest():
    p = IdmParams(v0=10.0)
    assert idm_acceleration(0.0, None, 0.0, p) == p.a


def test_idm_hand_evaluated():
    p = IdmParams(v0=15.0, T=1.5, a=1.5, b=2.0, s0=2.0, delta=4.0)
    expected = 1.5 * (1 - (10 / 15) ** 4 - (17 / 30) ** 2)
    assert idm_acceleration(10.0, 30.0, 0.0, p) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.72, abs=5e-3)


@pytest.mark.parametrize("gap", [0.0, -1.0])
def test_idm_non_positive_gap(gap):
    assert idm_acceleration(5.0, gap, 0.0, IdmParams()) == -EMERGENCY_DECEL


def test_idm_clamped_below():
    assert idm_acceleration(10.0, 0.01, 10.0, IdmParams()) == -EMERGENCY_DECEL


@given(st.floats(0, 20), st.one_of(st.none(), st.floats(0.01, 200)), st.floats(-20, 20))
def test_idm_bounds(v, gap, dv):
    p = IdmParams()
    acc = idm_acceleration(v, gap, dv, p)
    assert math.isfinite(acc)
    assert -EMERGENCY_DECEL <= acc <= p.a


def test_idm_params_validation():
    with pytest.raises(ValueError):
        IdmParams(T=0.0)
    with pytest.raises(ValueError):
        IdmParams(delta=0.5)


def test_binding_object_is_most_restrictive():
    p = IdmParams()
    near = VirtualObject(5.0, 0.0, "real-actor")
    far = VirtualObject(50.0, 0.0, "real-actor")
    acc = ego_acceleration(8.0, [far, near], p)
    assert acc == idm_acceleration(8.0, 5.0, 8.0, p)
    assert ego_acceleration(8.0, [], p) == idm_acceleration(8.0, None, 0.0, p)


# --- curvature limit ------------------------------------------------------


def test_curvature_object_straight_route():
    assert curvature_virtual_object(STRAIGHT, 10.0, IdmParams()) is None


def test_curvature_object_speed_limit():
    route = polyline_from_segments([{"line": [[0, 0], [20, 0]]}, {"arc": {"center": [20, 10], "radius": 10, "start_deg": -90, "end_deg": 0}}])
    obj = curvature_virtual_object(route, 0.0, IdmParams(v0=10.0, a_lat_max=2.5))
    assert obj.kind == "curvature-limit"
    assert obj.speed == pytest.approx(5.0, rel=1e-3)
    assert 20.0 <= obj.gap <= 21.0


def test_curvature_object_picks_sharper_curve():
    route = polyline_from_segments(
        [
            {"line": [[0, 0], [10, 0]]},
            {"arc": {"center": [10, 20], "radius": 20, "start_deg": -90, "end_deg": -80}},
        ]
    )
    end = route.points[-1]
    t = np.array([math.cos(math.radians(10)), math.sin(math.radians(10))])
    to_second = 30.0 - route.length
    start2 = end + to_second * t
    n = np.array([-t[1], t[0]])
    center = start2 + 5.0 * n
    a0 = math.degrees(math.atan2(-n[1], -n[0]))
    route = polyline_from_segments(
        [
            {"line": [[0, 0], [10, 0]]},
            {"arc": {"center": [10, 20], "radius": 20, "start_deg": -90, "end_deg": -80}},
            {"line": [list(end), list(start2)]},
            {"arc": {"center": list(center), "radius": 5, "start_deg": a0, "end_deg": a0 + 60}},
        ]
    )
    obj = curvature_virtual_object(route, 0.0, IdmParams(a_lat_max=2.5, lookahead=50.0))
    assert obj.speed == pytest.approx(math.sqrt(2.5 / 0.2), rel=1e-3)
    assert obj.speed == pytest.approx(3.54, abs=0.01)
    assert 30.0 <= obj.gap <= 30.5


@pytest.mark.parametrize("sid,radius,arc_start", [("A", 6.0, 117.25), ("B", 8.0, 118.75)])
def test_curvature_limit_slows_ego_through_turn(sid, radius, arc_start):
    ego = dataclasses.replace(load_scenario_library(sid).ego, start_s=60.0)
    tr = simulate(alone(ego))
    track = tr.actors["ego"]
    v_lim = math.sqrt(2.5 / (1.0 / radius))
    entry = track.v[np.argmax(track.s >= arc_start)]
    on_arc = (track.s >= arc_start) & (track.s <= arc_start + 0.8 * 0.5 * math.pi * radius)
    assert entry < 0.65 * ego.target_speed
    # speed on the arc approaches the cornering limit from above
    assert np.all(np.diff(track.v[on_arc]) <= 1e-12)
    assert v_lim <= track.v[on_arc].min() <= v_lim + 0.5
    assert tr.termination == "all-arrived"


# --- object filter --------------------------------------------------------


def test_scenario_a_car_never_filtered():
    a = load_scenario_library("A")
    c = instantiate(a, (0, 100, 10))
    car = c.actor("car")
    ego_st = ActorState(c.ego.start_s, 10.0, active=True)
    for s in np.linspace(0.0, car.route.length - 1e-6, 400):
        assert filter_objects(ego_st, c.ego, [(car, ActorState(s, 15.0, active=True))]) == []


def test_standing_pedestrian_on_path():
    ego = ego_spec()
    ped = straight_actor("p", (10.0, -5.0), (10.0, 5.0), kind="pedestrian", radius=0.3)
    objs = filter_objects(ActorState(0.0, 5.0, True), ego, [(ped, ActorState(5.0, 1.4, active=True))])
    assert len(objs) == 1
    assert objs[0].gap == pytest.approx(10.0 - 1.0 - 0.3)
    assert objs[0].speed == pytest.approx(0.0, abs=1e-12)
    assert objs[0].source == "p"


def test_filter_exclusions():
    ego = ego_spec()
    ped = straight_actor("p", (10.0, -5.0), (10.0, 5.0), kind="pedestrian", radius=0.3)
    ego_st = ActorState(20.0, 5.0, True)
    assert filter_objects(ego_st, ego, [(ped, ActorState(5.0, 1.4, active=True))]) == []  # behind
    ego_st = ActorState(0.0, 5.0, True)
    assert filter_objects(ego_st, ego, [(ped, ActorState(5.0, 0.0, active=False))]) == []  # delayed
    assert filter_objects(ego_st, ego, [(ped, ActorState(10.0, 0.0, arrived=True))]) == []  # finished
    # lateral edge: centre 2.05 m off the route is inside, 2.06 m is not
    assert len(filter_objects(ego_st, ego, [(ped, ActorState(5.0 + 2.05, 1.4, True))])) == 1
    assert filter_objects(ego_st, ego, [(ped, ActorState(5.0 + 2.06, 1.4, True))]) == []


def test_lead_vehicle_relative_speed():
    ego = ego_spec()
    lead = straight_actor("c", (0.0, 0.0), (100.0, 0.0))
    objs = filter_objects(ActorState(10.0, 10.0, True), ego, [(lead, ActorState(40.0, 6.0, True))])
    assert objs[0].gap == pytest.approx(28.0)
    assert objs[0].relative_speed(10.0) == pytest.approx(4.0)


# --- stepping -------------------------------------------------------------


def test_step_finished_state_unchanged():
    ego = ego_spec(start_s=99.99, v_init=10.0)
    st0 = initial_state(alone(ego))
    st1 = step(st0, SimConfig())
    assert st1.finished
    assert step(st1, SimConfig()) is st1


def test_scripted_actor_cruise_step():
    ped = straight_actor("p", (50.0, -20.0), (50.0, 20.0), kind="pedestrian", radius=0.3, target_speed=1.4, initial_speed=1.4)
    c = ConcreteScenario("t", (ego_spec(), ped), (), {})
    st1 = step(initial_state(c), SimConfig(dt=0.05))
    assert st1.states["p"].s == pytest.approx(0.07, abs=1e-15)
    assert st1.states["p"].v == 1.4


def test_ego_blocked_by_standing_pedestrian_stays_put():
    ped = straight_actor("p", (1.5 + 1.0 + 0.3, -20.0), (1.5 + 1.0 + 0.3, 20.0), kind="pedestrian", radius=0.3, start_s=20.0, start_delay=100.0)
    c = ConcreteScenario("t", (ego_spec(), ped), (), {})
    state = initial_state(c)
    # a delayed actor is not filtered, so activate it standing on the path
    state = dataclasses.replace(state, states={**state.states, "p": ActorState(20.0, 0.0, active=True)})
    for _ in range(40):
        state = step(state, SimConfig())
        state = dataclasses.replace(state, states={**state.states, "p": ActorState(20.0, 0.0, active=True)})
        assert state.states["ego"].v == 0.0
        assert state.states["ego"].s == 0.0


def test_step_matches_simulate():
    c = instantiate(load_scenario_library("B"), (3, 120, 20))
    cfg = SimConfig()
    tr = simulate(c, cfg)
    state = initial_state(c)
    for k in range(1, min(len(tr), 600)):
        state = step(state, cfg)
        for aid, track in tr.actors.items():
            if track.present[k]:
                assert state.states[aid].s == track.s[k]
                assert state.states[aid].v == track.v[k]


# --- whole simulations ----------------------------------------------------


def test_free_road_matches_ode_oracle():
    p = IdmParams(v0=10.0)

    def rhs(t, y):
        return [y[1], p.a * (1.0 - (y[1] / p.v0) ** p.delta)]

    def reach(t, y):
        return y[0] - 100.0

    reach.terminal = True
    sol = solve_ivp(rhs, (0.0, 60.0), [0.0, 0.0], events=reach, rtol=1e-10, atol=1e-10)
    t_ref, v_ref = sol.t_events[0][0], sol.y_events[0][0][1]

    cfg = SimConfig(dt=0.05)
    tr = simulate(alone(ego_spec()), cfg)
    track = tr.actors["ego"]
    assert tr.termination == "all-arrived"
    k = len(tr) - 1
    t_cross = tr.t[k] - (track.s[k - 1] + track.v[k] * cfg.dt - 100.0) / track.v[k]
    assert t_cross == pytest.approx(t_ref, abs=2 * cfg.dt)
    assert track.v[k] == pytest.approx(v_ref, abs=0.02)
    assert track.v[k] == pytest.approx(10.0, abs=0.2)
    assert len(tr) == pytest.approx(t_ref / cfg.dt + 1, abs=2)


def test_dt_convergence_first_order():
    def arrival(dt):
        tr = simulate(alone(ego_spec()), SimConfig(dt=dt))
        tk = tr.actors["ego"]
        k = len(tr) - 1
        return tr.t[k] - (tk.s[k - 1] + tk.v[k] * dt - 100.0) / tk.v[k]

    t1, t2, t3 = (arrival(dt) for dt in (0.1, 0.05, 0.025))
    assert (t1 - t2) / (t2 - t3) == pytest.approx(2.0, abs=0.5)


def test_short_horizon():
    tr = simulate(alone(ego_spec()), SimConfig(dt=0.05, horizon=0.1))
    assert len(tr) == 3
    assert list(tr.t) == [0.0, 0.05, 0.1]
    assert tr.termination == "horizon"


def test_collision_terminates():
    oncoming = straight_actor("truck", (100.0, 0.0), (0.0, 0.0), kind="truck", radius=1.5, target_speed=8.0, initial_speed=8.0)
    c = ConcreteScenario("t", (ego_spec(v_init=10.0), oncoming), (), {})
    tr = simulate(c)
    assert tr.termination == "collision"
    assert tr.collision == ("ego", "truck")
    e, o = tr.actors["ego"], tr.actors["truck"]
    assert math.hypot(e.x[-1] - o.x[-1], e.y[-1] - o.y[-1]) < 2.5
    assert math.hypot(e.x[-2] - o.x[-2], e.y[-2] - o.y[-2]) >= 2.5


def test_far_ego_yields_to_early_pedestrian():
    a = load_scenario_library("A")
    for k_delay in range(4):
        tr = simulate(instantiate(a, (k_delay, 0, 0)))
        assert tr.collision is None
        e, p = tr.actors["ego"], tr.actors["pedestrian"]
        both = e.present & p.present
        d = np.hypot(e.x - p.x, e.y - p.y)[both]
        assert d.min() >= 1.3


cells = st.tuples(st.sampled_from(["A", "B"]), st.integers(0, 49), st.integers(0, 249), st.integers(0, 49))


@given(cells)
def test_determinism(cell):
    sid, *idx = cell
    c = instantiate(load_scenario_library(sid), idx)
    assert simulate(c).to_csv() == simulate(c).to_csv()
    t1, t2 = simulate(c), simulate(c)
    for aid in t1.actors:
        for f in ("x", "y", "s", "v", "present"):
            assert np.array_equal(getattr(t1.actors[aid], f), getattr(t2.actors[aid], f))


@given(cells)
def test_kinematic_and_speed_invariants(cell):
    sid, *idx = cell
    c = instantiate(load_scenario_library(sid), idx)
    tr = simulate(c)
    for aid, tk in tr.actors.items():
        spec = c.actor(aid)
        moving = tk.present[1:] & (tk.s[1:] < spec.route.length)
        resid = np.abs(tk.s[1:] - tk.s[:-1] - tk.v[1:] * tr.dt)[moving]
        assert resid.max(initial=0.0) <= 1e-9
        assert np.all(tk.v >= 0)
        assert np.all(tk.s <= spec.route.length)
        if spec.behavior == "scripted":
            assert np.all(tk.v <= spec.target_speed)
        else:
            assert np.all(tk.v <= spec.target_speed + 1e-9)
        pts = spec.route.points_at(tk.s)
        assert np.allclose(pts[:, 0], tk.x) and np.allclose(pts[:, 1], tk.y)


@given(st.integers(0, 49), st.integers(0, 249), st.integers(0, 49), st.integers(0, 49))
def test_scenario_a_ego_ignores_car_speed(i, j, k1, k2):
    a = load_scenario_library("A")
    e1 = simulate(instantiate(a, (i, j, k1))).actors["ego"]
    e2 = simulate(instantiate(a, (i, j, k2))).actors["ego"]
    assert np.array_equal(e1.s, e2.s)
    assert np.array_equal(e1.v, e2.v)


def test_trace_csv():
    c = ConcreteScenario("t", (ego_spec(v_init=10.0), straight_actor("p", (50.0, -20.0), (50.0, 20.0), kind="pedestrian", radius=0.3, start_delay=50.0)), (), {})
    cfg = SimConfig(dt=0.05, horizon=2.0)
    tr = simulate(c, cfg)
    text = tr.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "t,actor,x,y,s,v"
    assert len(lines) - 1 == (cfg.steps + 1) * 2
    assert lines[1] == "0.000000,ego,0.000000,0.000000,0.000000,10.000000"
    cols = read_trace_csv(text)
    assert np.allclose(cols["ego"]["s"], tr.actors["ego"].s, atol=5e-7)
    assert set(cols) == {"ego", "p"}


def test_arrived_actor_rows_stop():
    c = ConcreteScenario("t", (ego_spec(v_init=10.0), straight_actor("p", (50.0, -20.0), (50.0, -19.0), kind="pedestrian", radius=0.3, target_speed=1.0, initial_speed=1.0)), (), {})
    tr = simulate(c, SimConfig(horizon=5.0))
    p = tr.actors["p"]
    last = np.flatnonzero(p.present)[-1]
    assert p.s[last] == 1.0
    assert not p.present[last + 1 :].any()
    assert sum(1 for r in tr.rows() if r[1] == "p") == last + 1
