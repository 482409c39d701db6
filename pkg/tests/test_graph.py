from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occrep.graph import (
    ExtractionError, OccupancyLabels, Sample, TrafficGraph, complement_segments, extract_graph,
    ground_truth_occupancy, make_sample, merge_intervals,
)
from occrep.lanes import Lanelet, LaneletNetwork, plan_route
from occrep.sim import VehicleState, generate_network, kinematic_trace, simulate


def long_road(length=100.0):
    return LaneletNetwork({1: Lanelet(1, [[0.0, 0.0], [length, 0.0]], 3.5)})


def chain3():
    return LaneletNetwork({
        1: Lanelet(1, [[0, 0], [10, 0]], 3.5, (2,)),
        2: Lanelet(2, [[10, 0], [20, 0]], 3.5, (3,)),
        3: Lanelet(3, [[20, 0], [30, 0]], 3.5),
    })


def car(vid, s, speed=0.0, length=5.0, lid=1):
    return VehicleState(vid, lid, s, speed, 0.0, length, 1.8)


def test_empty_frame():
    net = chain3()
    g = extract_graph(net, [])
    assert g.num_vehicles == 0 and len(g.v2l_src) == 0
    assert g.num_lanelets == 3 and len(g.l2l_src) == 4
    assert g.x_vehicle.shape == (0, 4) and g.x_v2l.shape == (0, 3)


def test_single_vehicle_features():
    g = extract_graph(long_road(), [car(1, 40.0, speed=5.0)])
    assert len(g.v2l_src) == 1
    assert 0 < g.x_v2l[0, 0] < 1
    assert g.x_v2l[0, 0] == pytest.approx(0.4)
    assert g.x_vehicle[0, 0] == 5.0


def test_chain_topology():
    g = extract_graph(chain3(), [])
    assert g.x_l2l.shape == (4, 5)
    rel = g.x_l2l[:, :4].argmax(axis=1)
    assert np.sum(rel == 0) == 2 and np.sum(rel == 1) == 2
    np.testing.assert_array_equal(g.x_l2l[:, :4].sum(axis=1), 1)
    pairs = {(int(g.lanelet_ids[a]), int(g.lanelet_ids[b]), int(r)) for a, b, r in zip(g.l2l_src, g.l2l_dst, rel)}
    assert pairs == {(1, 2, 0), (2, 3, 0), (2, 1, 1), (3, 2, 1)}


def test_vehicle_across_boundary_attaches_to_both():
    g = extract_graph(chain3(), [car(1, 9.0, length=4.0)])
    assert sorted(g.lanelet_ids[g.v2l_dst].tolist()) == [1, 2]


def test_unknown_lanelet():
    with pytest.raises(ExtractionError):
        extract_graph(chain3(), [car(1, 1.0, lid=9)])


def test_widths_and_finiteness():
    net = generate_network(2, "intersection")
    tr = simulate(net, 2, duration=1.0)
    g = extract_graph(net, tr.vehicles(0))
    assert g.x_lanelet.shape[1] == 3 and g.x_vehicle.shape[1] == 4
    for name in ("x_lanelet", "x_vehicle", "x_v2l", "x_l2l"):
        assert np.all(np.isfinite(getattr(g, name)))
    assert g.v2l_src.max() < g.num_vehicles and g.v2l_dst.max() < g.num_lanelets


def test_permutation_stability(rng):
    net = generate_network(4, "grid")
    vs = list(simulate(net, 4, duration=1.0).vehicles(0))
    assert len(vs) > 3
    a = extract_graph(net, vs)
    b = extract_graph(net, [vs[i] for i in rng.permutation(len(vs))])
    for k in TrafficGraph.__dataclass_fields__:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_graph_json_roundtrip():
    g = extract_graph(chain3(), [car(1, 3.0, 4.0)])
    back = TrafficGraph.from_dict(g.to_dict())
    for k in TrafficGraph.__dataclass_fields__:
        np.testing.assert_array_equal(getattr(back, k), getattr(g, k))


# -- labels


def _labels(vehicles, T_D=60, frames=80, ego=None):
    net = long_road()
    trace = kinematic_trace(net, vehicles, frames)
    ctx = plan_route(net, 1, 0.0, 45.0)
    return ground_truth_occupancy(trace, ctx, 0.0, 2.4, T_D, ego)


def test_no_vehicles_gives_empty_labels():
    lab = _labels([])
    assert lab.num_steps == 60 and all(ivs == () for _, ivs in lab.timesteps)
    assert lab.timesteps[1][0] == pytest.approx(0.04)


def test_stationary_vehicle():
    lab = _labels([car(2, 20.0)])
    assert all(ivs == ((17.5, 22.5),) for _, ivs in lab.timesteps)


def test_moving_vehicle_centers():
    lab = _labels([car(2, 20.0, speed=10.0)], T_D=6)
    centers = [(lo + hi) / 2 for _, ((lo, hi),) in lab.timesteps]
    np.testing.assert_allclose(centers, [20, 24, 28, 32, 36, 40], atol=0.1)


def test_labels_clip_at_path_end_and_keep_rear():
    lab = _labels([car(2, 44.0), car(3, 1.0)])
    assert lab.timesteps[0][1] == ((0.0, 3.5), (41.5, 45.0))


def test_ego_is_excluded():
    assert all(ivs == () for _, ivs in _labels([car(1, 2.0)], ego=1).timesteps)
    assert _labels([car(1, 2.0)]).timesteps[0][1] == ((0.0, 4.5),)


def test_off_lane_vehicle_ignored():
    net = LaneletNetwork({
        1: Lanelet(1, [[0, 0], [100, 0]], 3.5),
        2: Lanelet(2, [[0, 3.5], [100, 3.5]], 3.5),
    })
    trace = kinematic_trace(net, [car(5, 20.0, lid=2)], 70)
    lab = ground_truth_occupancy(trace, plan_route(net, 1, 0.0, 45.0), 0.0)
    assert all(ivs == () for _, ivs in lab.timesteps)


def test_horizon_exceeds_trace():
    with pytest.raises(IndexError):
        _labels([], frames=50)


def test_misaligned_start():
    net = long_road()
    trace = kinematic_trace(net, [], 100)
    with pytest.raises(ValueError):
        ground_truth_occupancy(trace, plan_route(net, 1, 0.0, 45.0), 0.05)


def test_complement_examples():
    assert complement_segments([[10, 15], [20, 25]], 45) == ([(10, 15), (20, 25)], [(0, 10), (15, 20), (25, 45)])
    assert complement_segments([], 45) == ([], [(0.0, 45)])
    assert complement_segments([[0, 45]], 45) == ([(0, 45)], [])


def test_merge_overlapping():
    assert merge_intervals([(5, 8), (-2, 1), (7, 12)], 10) == ((0, 1), (5, 10))


@given(st.lists(st.tuples(st.integers(-20, 60), st.integers(1, 15)), max_size=8))
def test_complement_partition_exact(raw):
    zeta = Fraction(45)
    occupied = [(Fraction(lo, 4), Fraction(lo, 4) + Fraction(w, 3)) for lo, w in raw]
    o_p, o_n = complement_segments(occupied, zeta)
    assert sum(hi - lo for lo, hi in o_p + o_n) == zeta
    pieces = sorted(o_p + o_n)
    for (a0, a1), (b0, b1) in zip(pieces, pieces[1:]):
        assert a1 == b0
    assert all(lo < hi for lo, hi in pieces)


def test_sample_roundtrip(tmp_path):
    net = generate_network(1, "straight")
    tr = simulate(net, 1, duration=4.0)
    from occrep.lanes import max_reach

    ego = next(v for v in tr.vehicles(0) if max_reach(net, v.lanelet_id) - v.s_on_lanelet >= 45)
    s = make_sample(tr, 0, ego.id, 3)
    f = tmp_path / "s.json"
    s.save(f)
    back = Sample.load(f)
    assert back.to_dict() == s.to_dict()
    assert back.labels.horizon == 2.4 and back.context.length == pytest.approx(45.0)
    assert isinstance(back.labels, OccupancyLabels)
