from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occrep.autodiff import Tensor, no_grad
from occrep.encoder import (
    ConsistencyError, EncoderParams, attention, batch_graphs, encode, encode_batch, l2l_update, v2l_embed,
)
from occrep.gradcheck import parameter_error
from occrep.graph import TrafficGraph, extract_graph
from occrep.lanes import Lanelet, LaneletNetwork, max_reach, plan_route
from occrep.sim import SpawnConfig, VehicleState, generate_network, simulate

SMALL = dict(hidden=16, latent=8, layers=4)


def chain(n=10, length=50.0):
    return LaneletNetwork({
        i: Lanelet(i, [[(i - 1) * length, 0.0], [i * length, 0.0]], 3.5, (i + 1,) if i < n else ())
        for i in range(1, n + 1)
    })


def car(vid, lid, s=25.0, speed=6.0):
    return VehicleState(vid, lid, s, speed, 0.0, 4.5, 1.8)


def _z(net, vehicles, params, route=1):
    ctx = plan_route(net, route, 0.0, 45.0)
    with no_grad():
        return encode(extract_graph(net, vehicles), ctx, params).data


def _with(params, **zeroed):
    w = dict(params.weights)
    for name in zeroed:
        w[name] = Tensor(np.zeros(w[name].shape))
    return replace(params, weights=w)


@pytest.fixture(scope="module")
def params():
    return EncoderParams.init(3, **SMALL)


def test_no_vehicles_embedding(params):
    net = chain(3)
    b = batch_graphs([(extract_graph(net, []), plan_route(net, 1, 0.0, 45.0))])
    with no_grad():
        h = v2l_embed(b, params).data
        ref = np.tanh(b.x_lanelet @ params["lanelet.w"].data + params["lanelet.b"].data)
    np.testing.assert_allclose(h, ref, rtol=1e-6)


def test_duplicate_vehicle_is_idempotent(params):
    net = chain(3)
    ctx = plan_route(net, 1, 0.0, 45.0)
    one = batch_graphs([(extract_graph(net, [car(1, 2)]), ctx)])
    two = batch_graphs([(extract_graph(net, [car(1, 2), car(2, 2)]), ctx)])
    with no_grad():
        np.testing.assert_array_equal(v2l_embed(one, params).data, v2l_embed(two, params).data)


def test_zero_messages_and_isolated_lanelet(params):
    net = chain(3)
    b = batch_graphs([(extract_graph(net, [car(1, 1)]), plan_route(net, 1, 0.0, 45.0))])
    h = Tensor(np.random.default_rng(0).normal(size=(3, SMALL["hidden"])))
    with no_grad():
        out = l2l_update(h, b, _with(params, **{"l2l.0.w": 0, "l2l.0.b": 0}), 0).data
    np.testing.assert_allclose(out, np.tanh(h.data), rtol=1e-6)

    lone = LaneletNetwork({1: Lanelet(1, [[0, 0], [50, 0]], 3.5)})
    b1 = batch_graphs([(extract_graph(lone, []), plan_route(lone, 1, 0.0, 45.0))])
    with no_grad():
        np.testing.assert_allclose(l2l_update(h[:1], b1, params, 2).data, np.tanh(h.data[:1]), rtol=1e-6)
    with pytest.raises(ValueError):
        l2l_update(h, b, params, 4)


def test_attention_examples(params):
    net = chain(3, length=20.0)
    ctx = plan_route(net, 1, 0.0, 45.0)
    assert len(ctx.route) == 3
    b = batch_graphs([(extract_graph(net, []), ctx)])
    with no_grad():
        uniform = attention(b, _with(params, **{"context.w": 0, "context.b": 0})).data
        single = attention(batch_graphs([(extract_graph(chain(1), []), plan_route(chain(1), 1, 0, 45))]), params).data
    np.testing.assert_allclose(uniform, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(single, [1.0])


@settings(max_examples=15)
@given(st.integers(0, 500), st.sampled_from(["straight", "merge", "intersection", "grid"]))
def test_attention_simplex(seed, template):
    net = generate_network(seed, template)
    starts = [lid for lid in net.ids if max_reach(net, lid) >= 45]
    items = [(extract_graph(net, []), plan_route(net, lid, 0.0, 45.0, seed)) for lid in starts]
    params = EncoderParams.init(seed, **SMALL)
    with no_grad():
        alpha = attention(batch_graphs(items), params).data.astype(np.float64)
    b = batch_graphs(items)
    sums = np.bincount(b.route_graph, weights=alpha)
    assert np.all(alpha >= 0)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)


def test_missing_route_lanelet(params):
    net = chain(3)
    ctx = plan_route(net, 1, 0.0, 45.0)
    g = extract_graph(net, [])
    with pytest.raises(ConsistencyError):
        batch_graphs([(replace(g, lanelet_ids=g.lanelet_ids + 10), ctx)])


def test_output_shape_and_range():
    params = EncoderParams.init(0)
    net = generate_network(1, "merge")
    tr = simulate(net, 1, duration=1.0)
    lid = next(i for i in net.ids if max_reach(net, i) >= 45)
    z = _z(net, tr.vehicles(0), params, route=lid)
    assert z.shape == (32,) and np.all(np.abs(z) < 1)


def _permute_graph(g: TrafficGraph, rng) -> TrafficGraph:
    pv = rng.permutation(g.num_vehicles)
    inv = np.argsort(pv)
    pe = rng.permutation(len(g.v2l_src))
    pl = rng.permutation(len(g.l2l_src))
    return replace(
        g,
        vehicle_ids=g.vehicle_ids[pv],
        x_vehicle=g.x_vehicle[pv],
        v2l_src=inv[g.v2l_src][pe],
        v2l_dst=g.v2l_dst[pe],
        x_v2l=g.x_v2l[pe],
        l2l_src=g.l2l_src[pl],
        l2l_dst=g.l2l_dst[pl],
        x_l2l=g.x_l2l[pl],
    )


@pytest.mark.parametrize("seed", range(5))
def test_permutation_invariance_exact(seed, params):
    rng = np.random.default_rng(seed)
    net = generate_network(seed, "grid")
    tr = simulate(net, seed, duration=1.0, spawn_config=SpawnConfig(rate=1.0))
    g = extract_graph(net, tr.vehicles(0))
    assert g.num_vehicles >= 2
    ctx = plan_route(net, next(i for i in net.ids if max_reach(net, i) >= 45), 0.0, 45.0, seed)
    with no_grad():
        a = encode(g, ctx, params).data
        b = encode(_permute_graph(g, rng), ctx, params).data
    np.testing.assert_array_equal(a, b)


def test_receptive_field_on_chain(params):
    net = chain(10)
    base = _z(net, [], params)
    # lanelet k is k-1 directed hops upstream of the route lanelet 1
    for lid in (6, 7, 10):
        np.testing.assert_array_equal(_z(net, [car(1, lid)], params), base)
    for lid in (2, 5):
        assert np.abs(_z(net, [car(1, lid)], params) - base).max() > 1e-6
    # a far static feature change is invisible as well
    far = LaneletNetwork({**net.lanelets, 8: replace(net[8], width=4.5)})
    np.testing.assert_array_equal(_z(far, [], params), base)


def test_end_to_end_gradient():
    params = EncoderParams.init(1, hidden=6, latent=3, layers=4)
    net = chain(3, length=20.0)
    graph = extract_graph(net, [car(1, 1, 5.0), car(2, 2, 8.0, speed=3.0)])
    b = batch_graphs([(graph, plan_route(net, 1, 0.0, 45.0))])
    w = np.array([0.3, -1.2, 0.7])

    def loss(weights):
        return (encode_batch(b, replace(params, weights=dict(weights))) * w).sum()

    errs = parameter_error(loss, params.weights, h=3e-4)
    assert max(errs.values()) < 1e-3, errs
