"""Heterogeneous traffic graphs and ground-truth path occupancy labels."""

from __future__ import annotations

import json
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .lanes import LaneletNetwork, ReferencePath, RouteContext, iter_edges, plan_route, project_points
from .sim import ScenarioTrace, VehicleState, vehicle_pose

VEHICLE_FEATURES = 4  # speed, accel, length, width
LANELET_FEATURES = 3  # length, mean curvature, width
V2L_FEATURES = 3  # normalized arclength position, lateral offset, heading difference
L2L_FEATURES = 5  # relation one-hot (succ, pred, adj-left, adj-right), source length


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrafficGraph:
    lanelet_ids: np.ndarray
    x_lanelet: np.ndarray
    vehicle_ids: np.ndarray
    x_vehicle: np.ndarray
    v2l_src: np.ndarray
    v2l_dst: np.ndarray
    x_v2l: np.ndarray
    l2l_src: np.ndarray
    l2l_dst: np.ndarray
    x_l2l: np.ndarray

    @property
    def num_lanelets(self) -> int:
        return len(self.lanelet_ids)

    @property
    def num_vehicles(self) -> int:
        return len(self.vehicle_ids)

    def lanelet_index(self, lid: int) -> int:
        hits = np.flatnonzero(self.lanelet_ids == lid)
        if len(hits) == 0:
            raise KeyError(lid)
        return int(hits[0])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrafficGraph":
        ints = {"lanelet_ids", "vehicle_ids", "v2l_src", "v2l_dst", "l2l_src", "l2l_dst"}
        widths = {"x_lanelet": LANELET_FEATURES, "x_vehicle": VEHICLE_FEATURES, "x_v2l": V2L_FEATURES, "x_l2l": L2L_FEATURES}
        kw = {}
        for k in cls.__dataclass_fields__:
            if k in ints:
                kw[k] = np.asarray(d[k], dtype=np.int64)
            else:
                kw[k] = np.asarray(d[k], dtype=np.float64).reshape(-1, widths[k])
        return cls(**kw)


_STATIC: "weakref.WeakKeyDictionary[LaneletNetwork, dict]" = weakref.WeakKeyDictionary()


def _static_part(network: LaneletNetwork) -> dict:
    cached = _STATIC.get(network)
    if cached is not None:
        return cached
    ids = np.asarray(network.ids, dtype=np.int64)
    x_l = np.array(
        [[network[i].length, network[i].mean_curvature, network[i].width] for i in network.ids],
        dtype=np.float64,
    ).reshape(-1, LANELET_FEATURES)
    src, dst, feat = [], [], []
    for a, b, rel in iter_edges(network):
        src.append(network.index[a])
        dst.append(network.index[b])
        row = [0.0] * L2L_FEATURES
        row[rel] = 1.0
        row[4] = network[a].length
        feat.append(row)
    paths = {lid: ReferencePath(network[lid].centerline) for lid in network.ids}
    cached = dict(
        ids=ids,
        x_l=x_l,
        l2l_src=np.asarray(src, dtype=np.int64),
        l2l_dst=np.asarray(dst, dtype=np.int64),
        x_l2l=np.asarray(feat, dtype=np.float64).reshape(-1, L2L_FEATURES),
        paths=paths,
    )
    _STATIC[network] = cached
    return cached


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


def extract_graph(network: LaneletNetwork, vehicles: Sequence[VehicleState]) -> TrafficGraph:
    """Graph snapshot for one frame.

    A vehicle is attached to every lanelet whose surface holds its rear,
    center or front point (its own lanelet always), so crossing lanelets in
    junctions pick up vehicles driving through them.
    """
    static = _static_part(network)
    if isinstance(vehicles, tuple) and len(vehicles) == 2 and not isinstance(vehicles[0], VehicleState):
        vehicles = vehicles[1]
    vehicles = sorted(vehicles, key=lambda v: v.id)
    x_v = np.array(
        [[v.speed, v.accel, v.length, v.width] for v in vehicles], dtype=np.float64
    ).reshape(-1, VEHICLE_FEATURES)
    src, dst, feat = [], [], []
    for vi, v in enumerate(vehicles):
        if v.lanelet_id not in network.lanelets:
            raise ExtractionError(f"vehicle {v.id} on unknown lanelet {v.lanelet_id}")
        center, heading = vehicle_pose(network, v)
        direction = np.array([np.cos(heading), np.sin(heading)])
        probes = np.vstack([center - direction * v.length / 2, center, center + direction * v.length / 2])
        for lid in network.ids:
            ll = network[lid]
            path = static["paths"][lid]
            s, off = project_points(path, probes, clamp=False)
            on = (np.abs(off) <= ll.width / 2) & (s >= 0.0) & (s <= path.length)
            if lid != v.lanelet_id and not on.any():
                continue
            if lid == v.lanelet_id:
                s_c, off_c = v.s_on_lanelet, 0.0
            else:
                s_c, off_c = float(s[1]), float(off[1])
            pos = float(np.clip(s_c / ll.length, 0.0, 1.0))
            dh = float(_wrap(heading - ll.heading_at(np.clip(s_c, 0.0, ll.length))))
            src.append(vi)
            dst.append(network.index[lid])
            feat.append([pos, off_c, dh])
    return TrafficGraph(
        lanelet_ids=static["ids"],
        x_lanelet=static["x_l"],
        vehicle_ids=np.asarray([v.id for v in vehicles], dtype=np.int64),
        x_vehicle=x_v,
        v2l_src=np.asarray(src, dtype=np.int64),
        v2l_dst=np.asarray(dst, dtype=np.int64),
        x_v2l=np.asarray(feat, dtype=np.float64).reshape(-1, V2L_FEATURES),
        l2l_src=static["l2l_src"],
        l2l_dst=static["l2l_dst"],
        x_l2l=static["x_l2l"],
    )


# -- occupancy labels ------------------------------------------------------------


@dataclass(frozen=True)
class OccupancyLabels:
    horizon: float
    zeta: float
    timesteps: tuple[tuple[float, tuple[tuple[float, float], ...]], ...]

    @property
    def num_steps(self) -> int:
        return len(self.timesteps)

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "zeta": self.zeta,
            "timesteps": [[t, [list(iv) for iv in ivs]] for t, ivs in self.timesteps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OccupancyLabels":
        return cls(
            float(d["horizon"]),
            float(d["zeta"]),
            tuple((float(t), tuple((float(a), float(b)) for a, b in ivs)) for t, ivs in d["timesteps"]),
        )


def merge_intervals(intervals, zeta: float) -> tuple[tuple[float, float], ...]:
    clipped = sorted((max(0.0, lo), min(zeta, hi)) for lo, hi in intervals)
    merged: list[list[float]] = []
    for lo, hi in clipped:
        if hi <= lo:
            continue
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return tuple((a, b) for a, b in merged)


def complement_segments(occupied, zeta: float):
    """Split [0, zeta] into occupied (O_p) and free (O_n) segments in path order."""
    o_p = merge_intervals(occupied, zeta)
    o_n = []
    cursor = 0.0
    for lo, hi in o_p:
        if lo > cursor:
            o_n.append((cursor, lo))
        cursor = hi
    if cursor < zeta:
        o_n.append((cursor, zeta))
    return list(o_p), o_n


def _frame_index(trace: ScenarioTrace, t: float) -> int:
    k = t / trace.dt
    if abs(k - round(k)) > 1e-6:
        raise ValueError(f"time {t} not aligned with trace dt {trace.dt}")
    return int(round(k))


def ground_truth_occupancy(
    trace: ScenarioTrace,
    context: RouteContext,
    t0: float,
    T: float = 2.4,
    T_D: int = 60,
    ego_id: int | None = None,
) -> OccupancyLabels:
    """Project every non-ego vehicle onto the route for each of ``T_D`` future frames.

    A vehicle counts when its center lies within half a lane width of the
    path; it then covers ``[s_c - len/2, s_c + len/2]`` clipped to the path.
    Points past the path ends are measured along the end tangents.
    """
    dt = T / T_D
    k0 = _frame_index(trace, t0)
    ratio = dt / trace.dt
    if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
        raise ValueError(f"label step {dt} is not a multiple of trace dt {trace.dt}")
    step = int(round(ratio))
    last = k0 + (T_D - 1) * step
    if k0 < 0 or last >= len(trace):
        raise IndexError(f"horizon [{t0}, {t0 + T}) exceeds the trace")
    path, zeta = context.path, context.length
    half_widths = {lid: trace.network[lid].width / 2 for lid in context.route}
    ends = np.cumsum(context.context[:, 1] - context.context[:, 0])
    route = np.asarray(context.route)

    steps = []
    for k in range(T_D):
        vehicles = [v for v in trace.vehicles(k0 + k * step) if v.id != ego_id]
        intervals = []
        if vehicles:
            centers = np.array([vehicle_pose(trace.network, v)[0] for v in vehicles])
            s, off = project_points(path, centers, clamp=False)
            j = np.clip(np.searchsorted(ends, np.clip(s, 0, zeta), side="left"), 0, len(route) - 1)
            hw = np.array([half_widths[lid] for lid in route[j]])
            lengths = np.array([v.length for v in vehicles])
            for keep, sc, ln in zip(np.abs(off) <= hw, s, lengths):
                if keep:
                    intervals.append((sc - ln / 2, sc + ln / 2))
        steps.append((round(k * dt, 9), merge_intervals(intervals, zeta)))
    return OccupancyLabels(horizon=T, zeta=zeta, timesteps=tuple(steps))


# -- samples ---------------------------------------------------------------------


@dataclass(frozen=True)
class Anchor:
    scenario_id: int
    frame: int
    ego_id: int


@dataclass(frozen=True, eq=False)
class Sample:
    graph: TrafficGraph
    context: RouteContext
    labels: OccupancyLabels
    anchor: Anchor | None = None

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.to_dict(),
            "context": self.context.to_dict(),
            "labels": self.labels.to_dict(),
            "anchor": None if self.anchor is None else self.anchor.__dict__,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        anchor = d.get("anchor")
        return cls(
            TrafficGraph.from_dict(d["graph"]),
            RouteContext.from_dict(d["context"]),
            OccupancyLabels.from_dict(d["labels"]),
            None if anchor is None else Anchor(**anchor),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Sample":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_sample(
    trace: ScenarioTrace,
    frame: int,
    ego_id: int,
    route_seed,
    zeta: float = 45.0,
    T: float = 2.4,
    T_D: int = 60,
) -> Sample:
    """Graph, random ego route and occupancy labels anchored at ``frame``."""
    ego = next((v for v in trace.vehicles(frame) if v.id == ego_id), None)
    if ego is None:
        raise ExtractionError(f"ego {ego_id} absent from frame {frame}")
    context = plan_route(trace.network, ego.lanelet_id, ego.s_on_lanelet, zeta, route_seed)
    graph = extract_graph(trace.network, trace.vehicles(frame))
    labels = ground_truth_occupancy(trace, context, trace.frames[frame][0], T, T_D, ego_id)
    return Sample(graph, context, labels, Anchor(trace.scenario_id, frame, ego_id))


def candidate_anchors(trace: ScenarioTrace, zeta: float = 45.0, T: float = 2.4, T_D: int = 60) -> list[tuple[int, int]]:
    """(frame, ego id) pairs with a full label horizon and a feasible route."""
    from .lanes import max_reach

    step = int(round(T / T_D / trace.dt))
    last = len(trace) - 1 - (T_D - 1) * step
    out = []
    for k in range(max(last + 1, 0)):
        for v in trace.vehicles(k):
            if max_reach(trace.network, v.lanelet_id) - v.s_on_lanelet >= zeta:
                out.append((k, v.id))
    return out


def sample_anchors(
    trace: ScenarioTrace, count: int, rng: np.random.Generator, zeta: float = 45.0, T: float = 2.4, T_D: int = 60
) -> list[Anchor]:
    cands = candidate_anchors(trace, zeta, T, T_D)
    if not cands:
        return []
    pick = rng.choice(len(cands), size=min(count, len(cands)), replace=False)
    return [Anchor(trace.scenario_id, *cands[i]) for i in sorted(pick)]
