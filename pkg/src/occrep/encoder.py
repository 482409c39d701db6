"""Ego-conditioned heterogeneous graph encoder.

Pipeline: vehicle-to-lanelet embedding, ``layers`` residual lanelet-to-lanelet
message-passing rounds (max aggregation, tanh), an attentional readout over
the ego route weighted by its spatial context, and a tanh downscaling layer.
Several graphs are encoded at once as one disjoint union.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .autodiff import Tensor, default_dtype, segment_max, segment_sum
from .graph import L2L_FEATURES, LANELET_FEATURES, V2L_FEATURES, VEHICLE_FEATURES, TrafficGraph
from .lanes import RouteContext

# fixed input scaling so raw meters and m/s do not saturate the first tanh
LANELET_SCALE = np.array([50.0, 0.1, 3.5])
VEHICLE_SCALE = np.array([15.0, 3.0, 10.0, 3.0])
V2L_SCALE = np.array([1.0, 3.5, np.pi])
L2L_SCALE = np.array([1.0, 1.0, 1.0, 1.0, 50.0])
CONTEXT_SCALE = 45.0


class ConsistencyError(ValueError):
    """Route references a lanelet missing from the graph."""


@dataclass
class EncoderParams:
    weights: dict[str, Tensor]
    hidden: int = 256
    latent: int = 32
    layers: int = 4

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 256, latent: int = 32, layers: int = 4) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        v2l_in = VEHICLE_FEATURES + LANELET_FEATURES + V2L_FEATURES
        w = {
            "lanelet.w": nn.glorot(rng, LANELET_FEATURES, hidden),
            "lanelet.b": nn.bias(hidden),
            "v2l.w": nn.glorot(rng, v2l_in, hidden),
            "v2l.b": nn.bias(hidden),
        }
        for layer in range(layers):
            w[f"l2l.{layer}.w"] = nn.glorot(rng, 2 * hidden + L2L_FEATURES, hidden)
            w[f"l2l.{layer}.b"] = nn.bias(hidden)
        w["context.w"] = nn.glorot(rng, 4, 1)
        w["context.b"] = nn.bias(1)
        w["latent.w"] = nn.glorot(rng, hidden, latent)
        w["latent.b"] = nn.bias(latent)
        return cls(w, hidden, latent, layers)

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of several graphs plus their ego routes."""

    num_graphs: int
    x_lanelet: np.ndarray
    x_vehicle: np.ndarray
    v2l_src: np.ndarray
    v2l_dst: np.ndarray
    x_v2l: np.ndarray
    l2l_src: np.ndarray
    l2l_dst: np.ndarray
    x_l2l: np.ndarray
    route_nodes: np.ndarray
    route_graph: np.ndarray
    context: np.ndarray

    @property
    def num_lanelets(self) -> int:
        return len(self.x_lanelet)


def batch_graphs(items: Sequence[tuple[TrafficGraph, RouteContext]]) -> GraphBatch:
    parts: dict[str, list] = {k: [] for k in GraphBatch.__dataclass_fields__ if k != "num_graphs"}
    l_off = v_off = 0
    for gi, (g, ctx) in enumerate(items):
        lookup = {int(lid): i for i, lid in enumerate(g.lanelet_ids)}
        missing = [lid for lid in ctx.route if lid not in lookup]
        if missing:
            raise ConsistencyError(f"route lanelets {missing} not in graph")
        # canonical edge order makes the result independent of node/edge listing order
        x_v = np.reshape(g.x_vehicle, (-1, VEHICLE_FEATURES))
        x_v2l = np.reshape(g.x_v2l, (-1, V2L_FEATURES))
        keys = np.column_stack([g.v2l_dst, x_v[g.v2l_src], x_v2l]) if len(g.v2l_src) else np.zeros((0, 1))
        v_order = np.lexsort(keys.T[::-1]) if len(keys) else np.zeros(0, dtype=np.int64)
        relation = np.reshape(g.x_l2l, (-1, L2L_FEATURES))[:, :4].argmax(1)
        l_order = np.lexsort((relation, g.l2l_src, g.l2l_dst))
        parts["x_lanelet"].append(g.x_lanelet / LANELET_SCALE)
        parts["x_vehicle"].append(x_v / VEHICLE_SCALE)
        parts["v2l_src"].append(g.v2l_src[v_order] + v_off)
        parts["v2l_dst"].append(g.v2l_dst[v_order] + l_off)
        parts["x_v2l"].append(x_v2l[v_order] / V2L_SCALE)
        parts["l2l_src"].append(g.l2l_src[l_order] + l_off)
        parts["l2l_dst"].append(g.l2l_dst[l_order] + l_off)
        parts["x_l2l"].append(np.reshape(g.x_l2l, (-1, L2L_FEATURES))[l_order] / L2L_SCALE)
        parts["route_nodes"].append(np.array([lookup[lid] for lid in ctx.route], dtype=np.int64) + l_off)
        parts["route_graph"].append(np.full(len(ctx.route), gi, dtype=np.int64))
        parts["context"].append(np.asarray(ctx.context) / CONTEXT_SCALE)
        l_off += g.num_lanelets
        v_off += g.num_vehicles
    widths = {
        "x_lanelet": LANELET_FEATURES,
        "x_vehicle": VEHICLE_FEATURES,
        "x_v2l": V2L_FEATURES,
        "x_l2l": L2L_FEATURES,
        "context": 4,
    }
    out = {}
    for k, v in parts.items():
        if k in widths:
            out[k] = np.concatenate([np.reshape(a, (-1, widths[k])) for a in v]).astype(default_dtype())
        else:
            out[k] = np.concatenate(v).astype(np.int64)
    return GraphBatch(num_graphs=len(items), **out)


def v2l_embed(batch: GraphBatch, params: EncoderParams) -> Tensor:
    """Initial lanelet states: tanh(lanelet map + max over incident vehicle messages)."""
    base = nn.linear(Tensor(batch.x_lanelet), params["lanelet.w"], params["lanelet.b"])
    if len(batch.v2l_src):
        edge_in = np.concatenate(
            [batch.x_vehicle[batch.v2l_src], batch.x_lanelet[batch.v2l_dst], batch.x_v2l], axis=1
        )
        msg = nn.linear(Tensor(edge_in), params["v2l.w"], params["v2l.b"])
        base = base + segment_max(msg, batch.v2l_dst, batch.num_lanelets)
    return base.tanh()


def l2l_update(h: Tensor, batch: GraphBatch, params: EncoderParams, layer: int) -> Tensor:
    """Residual max-aggregated message passing over lanelet relations."""
    if layer >= params.layers:
        raise ValueError(f"layer {layer} >= {params.layers}")
    H = params.hidden
    if len(batch.l2l_src) == 0:
        return h.tanh()
    w, b = params[f"l2l.{layer}.w"], params[f"l2l.{layer}.b"]
    src_part = (h @ w[:H]).take(batch.l2l_src)
    dst_part = (h @ w[H : 2 * H]).take(batch.l2l_dst)
    edge_part = Tensor(batch.x_l2l) @ w[2 * H :]
    msg = src_part + dst_part + edge_part + b
    return (h + segment_max(msg, batch.l2l_dst, batch.num_lanelets)).tanh()


def attention(batch: GraphBatch, params: EncoderParams) -> Tensor:
    """Softmax over each graph's route lanelets of the context logits."""
    logits = nn.linear(Tensor(batch.context), params["context.w"], params["context.b"]).reshape(-1)
    shift = np.full(batch.num_graphs, -np.inf)
    np.maximum.at(shift, batch.route_graph, logits.data)
    e = (logits - shift[batch.route_graph].astype(logits.dtype)).exp()
    denom = segment_sum(e, batch.route_graph, batch.num_graphs)
    return e / denom.take(batch.route_graph)


def ego_readout(h: Tensor, batch: GraphBatch, params: EncoderParams) -> Tensor:
    alpha = attention(batch, params)
    weighted = h.take(batch.route_nodes) * alpha.reshape(-1, 1)
    return segment_sum(weighted, batch.route_graph, batch.num_graphs)


def encode_batch(batch: GraphBatch, params: EncoderParams) -> Tensor:
    """Latent states, one row of length ``latent`` per graph."""
    h = v2l_embed(batch, params)
    for layer in range(params.layers):
        h = l2l_update(h, batch, params, layer)
    h_ego = ego_readout(h, batch, params)
    return nn.linear(h_ego, params["latent.w"], params["latent.b"]).tanh()


def encode(graph: TrafficGraph, route_context: RouteContext, params: EncoderParams) -> Tensor:
    return encode_batch(batch_graphs([(graph, route_context)]), params).reshape(-1)
