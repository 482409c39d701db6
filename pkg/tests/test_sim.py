import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occrep.lanes import plan_route
from occrep.sim import (
    TEMPLATES, CollisionError, IDMParams, ScenarioTrace, SpawnConfig, VehicleState,
    generate_network, idm_acceleration, kinematic_trace, simulate,
)


def _segments_cross(p, q):
    """Proper intersection of two polylines, ignoring shared endpoints."""
    for a, b in zip(p[:-1], p[1:]):
        for c, d in zip(q[:-1], q[1:]):
            m = np.array([b - a, c - d]).T
            if abs(np.linalg.det(m)) < 1e-12:
                continue
            u, w = np.linalg.solve(m, c - a)
            if 1e-6 < u < 1 - 1e-6 and 1e-6 < w < 1 - 1e-6:
                return True
    return False


def test_straight_template():
    net = generate_network(1, "straight")
    assert len(net.ids) == 3
    first = net.entries[0]
    ctx = plan_route(net, first, 0.0, 90.0)
    assert len(ctx.route) == 3
    assert sum(net[i].length for i in net.ids) >= 90


def test_intersection_has_crossing_routes():
    net = generate_network(1, "intersection")
    routes = {plan_route(net, e, 0.0, 45.0, seed).route for e in net.entries for seed in range(10)}
    paths = {r: np.concatenate([net[i].centerline for i in r]) for r in routes}
    crossing = [
        (a, b) for a, b in itertools.combinations(routes, 2)
        if a[0] != b[0] and _segments_cross(paths[a], paths[b])
    ]
    assert len(crossing) >= 1


@pytest.mark.parametrize("template", TEMPLATES)
def test_network_determinism(template):
    assert generate_network(1, template).dumps() == generate_network(1, template).dumps()


def test_unknown_template():
    with pytest.raises(ValueError):
        generate_network(1, "roundabout")


def test_idm_free_road():
    p = IDMParams()
    assert idm_acceleration(1e9, p.v0, p.v0) == pytest.approx(0.0, abs=1e-9)
    assert idm_acceleration(1e9, 0.0, 0.0) == pytest.approx(p.a, abs=1e-9)


def test_idm_following_at_equilibrium_gap():
    p = IDMParams()
    # at gap s0 + vT the free-road term 1-(v/v0)^4 is not 1, so the model still brakes:
    # 1.5*(1 - (10/13.9)^4 - 1) by hand
    assert idm_acceleration(p.s0 + 10 * p.T, 10.0, 10.0) == pytest.approx(-0.4018198, abs=1e-6)
    # the true steady-state gap is s*/sqrt(1-(v/v0)^4)
    gap = (p.s0 + 10 * p.T) / np.sqrt(1 - (10 / p.v0) ** 4)
    assert abs(idm_acceleration(gap, 10.0, 10.0)) < 0.05


def test_idm_clamps_and_rejects_collision():
    p = IDMParams()
    assert idm_acceleration(0.1, 13.0, 0.0) == -p.b_max
    with pytest.raises(CollisionError):
        idm_acceleration(0.0, 5.0, 5.0)


def test_frame_count_and_spacing():
    tr = simulate(generate_network(0, "straight"), 0, duration=10.0, dt=0.1)
    assert len(tr) == 100
    np.testing.assert_allclose(np.diff([t for t, _ in tr.frames]), 0.1, atol=1e-9)


def test_bad_duration():
    with pytest.raises(ValueError):
        simulate(generate_network(0, "straight"), 0, duration=0.01, dt=0.1)


def test_constant_speed_displacement():
    net = generate_network(1, "straight")
    v = VehicleState(1, net.entries[0], 1.0, 9.0, 0.0, 4.0, 1.8)
    tr = kinematic_trace(net, [v], 20, dt=0.04)
    s = [f[1][0].s_on_lanelet for f in tr.frames]
    np.testing.assert_allclose(np.diff(s), 9.0 * 0.04, atol=1e-9)


def test_zero_spawn_rate_gives_empty_road():
    net = generate_network(1, "straight")
    tr = simulate(net, 3, duration=4.0, spawn_config=SpawnConfig(rate=0.0))
    assert all(not vs for _, vs in tr.frames)


def _same_lane_gaps(trace):
    gaps = []
    for _, vs in trace.frames:
        by_lane = {}
        for v in vs:
            by_lane.setdefault(v.lanelet_id, []).append(v)
        for group in by_lane.values():
            for a, b in itertools.combinations(group, 2):
                gaps.append(abs(a.s_on_lanelet - b.s_on_lanelet) - (a.length + b.length) / 2)
    return gaps


@pytest.mark.parametrize("template", ["straight", "merge", "grid"])
def test_no_overlap_and_speed_bounds(template):
    net = generate_network(2, template)
    tr = simulate(net, 4, duration=20.0, spawn_config=SpawnConfig(rate=0.6))
    gaps = _same_lane_gaps(tr)
    assert gaps and min(gaps) > 0
    v0 = IDMParams().v0
    speeds = [v.speed for _, vs in tr.frames for v in vs]
    assert min(speeds) >= 0 and max(speeds) <= 1.05 * v0


@settings(max_examples=8)
@given(st.integers(0, 1000), st.sampled_from(TEMPLATES))
def test_trace_invariants(seed, template):
    net = generate_network(seed, template)
    tr = simulate(net, seed, duration=3.0, spawn_config=SpawnConfig(rate=0.8, warmup=10.0))
    for _, vs in tr.frames:
        for v in vs:
            assert 0 <= v.s_on_lanelet <= net[v.lanelet_id].length + 1e-9
            assert 2 <= v.length <= 12
            assert v.speed >= 0
    # ids stay put while present: a vehicle never reappears after leaving
    seen, gone = set(), set()
    for _, vs in tr.frames:
        now = {v.id for v in vs}
        assert not (now & gone)
        gone |= seen - now
        seen = now


def test_simulation_determinism(tmp_path):
    net = generate_network(5, "intersection")
    a = simulate(net, 11, duration=5.0)
    b = simulate(net, 11, duration=5.0)
    assert a.dumps() == b.dumps()
    f = tmp_path / "t.jsonl"
    a.save(f)
    assert ScenarioTrace.load(f).dumps() == a.dumps()
    assert simulate(net, 12, duration=5.0).dumps() != a.dumps()


def test_vehicle_json_keys():
    v = VehicleState(3, 1, 2.0, 5.0, 0.5, 4.0, 1.8)
    assert set(v.to_dict()) == {"id", "lanelet", "s", "speed", "accel", "len", "width"}
    assert VehicleState.from_dict(v.to_dict()) == v
