"""Lanelet road networks, arclength-parameterized reference paths and ego routes."""

from __future__ import annotations

import json
import math
import weakref
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ENDPOINT_TOL = 1e-6


class NetworkError(ValueError):
    """Malformed lanelet or network."""


class RouteError(RuntimeError):
    """No route of the requested length exists from the start position."""


def _as_polyline(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise NetworkError(f"polyline must be (n, 2), got {pts.shape}")
    pts = pts.copy()
    pts.setflags(write=False)
    return pts


def _cumulative(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


@dataclass(frozen=True, eq=False)
class Lanelet:
    id: int
    centerline: np.ndarray
    width: float
    successors: tuple[int, ...] = ()
    adjacent_left: int | None = None
    adjacent_right: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "centerline", _as_polyline(self.centerline))
        object.__setattr__(self, "successors", tuple(int(s) for s in self.successors))
        if len(self.centerline) < 2:
            raise NetworkError(f"lanelet {self.id}: centerline needs >= 2 points")
        if np.any(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1) <= 0.0):
            raise NetworkError(f"lanelet {self.id}: repeated consecutive centerline points")
        if not self.width > 0:
            raise NetworkError(f"lanelet {self.id}: width must be positive")

    @cached_property
    def arclength(self) -> np.ndarray:
        return _cumulative(self.centerline)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    @cached_property
    def mean_curvature(self) -> float:
        """Signed total turning angle per unit length."""
        d = np.diff(self.centerline, axis=0)
        if len(d) < 2:
            return 0.0
        heading = np.arctan2(d[:, 1], d[:, 0])
        turn = np.angle(np.exp(1j * np.diff(heading)))
        return float(turn.sum() / self.length)

    def point_at(self, s: float) -> np.ndarray:
        return _interp(self.centerline, self.arclength, float(np.clip(s, 0.0, self.length)))

    def heading_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self.arclength, s, side="right") - 1, 0, len(self.centerline) - 2))
        d = self.centerline[i + 1] - self.centerline[i]
        return float(np.arctan2(d[1], d[0]))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "centerline": self.centerline.tolist(),
            "width": self.width,
            "successors": list(self.successors),
            "adj_left": self.adjacent_left,
            "adj_right": self.adjacent_right,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Lanelet":
        return cls(
            id=int(d["id"]),
            centerline=d["centerline"],
            width=float(d["width"]),
            successors=tuple(d.get("successors", ())),
            adjacent_left=d.get("adj_left"),
            adjacent_right=d.get("adj_right"),
        )


@dataclass(frozen=True, eq=False)
class LaneletNetwork:
    lanelets: dict[int, Lanelet]

    def __post_init__(self):
        ids = set(self.lanelets)
        for ll in self.lanelets.values():
            refs = list(ll.successors) + [r for r in (ll.adjacent_left, ll.adjacent_right) if r is not None]
            dangling = [r for r in refs if r not in ids]
            if dangling:
                raise NetworkError(f"lanelet {ll.id} references unknown lanelets {dangling}")
            for succ in ll.successors:
                gap = np.linalg.norm(ll.centerline[-1] - self.lanelets[succ].centerline[0])
                if gap > ENDPOINT_TOL:
                    raise NetworkError(
                        f"lanelet {ll.id} ends {gap:.3g} m away from successor {succ}'s start"
                    )

    @cached_property
    def ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.lanelets))

    @cached_property
    def index(self) -> dict[int, int]:
        return {lid: i for i, lid in enumerate(self.ids)}

    @cached_property
    def predecessors(self) -> dict[int, tuple[int, ...]]:
        pred: dict[int, list[int]] = {lid: [] for lid in self.ids}
        for lid in self.ids:
            for s in self.lanelets[lid].successors:
                pred[s].append(lid)
        return {k: tuple(v) for k, v in pred.items()}

    @cached_property
    def entries(self) -> tuple[int, ...]:
        return tuple(lid for lid in self.ids if not self.predecessors[lid])

    def __getitem__(self, lid: int) -> Lanelet:
        return self.lanelets[lid]

    def __len__(self) -> int:
        return len(self.lanelets)

    def to_dict(self) -> dict:
        return {"lanelets": [self.lanelets[i].to_dict() for i in self.ids]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "LaneletNetwork":
        lls = [Lanelet.from_dict(x) for x in d["lanelets"]]
        return cls({ll.id: ll for ll in lls})

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "LaneletNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _interp(points: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(points) - 2))
    u = (s - cum[i]) / (cum[i + 1] - cum[i])
    return points[i] + u * (points[i + 1] - points[i])


@dataclass(frozen=True, eq=False)
class ReferencePath:
    points: np.ndarray
    cumulative_arclength: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        keep = np.r_[True, np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9]
        pts = _as_polyline(pts[keep])
        if len(pts) < 2:
            raise NetworkError("reference path needs two distinct points")
        object.__setattr__(self, "points", pts)
        cum = _cumulative(pts)
        cum.setflags(write=False)
        object.__setattr__(self, "cumulative_arclength", cum)

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def to_dict(self) -> dict:
        return {"points": self.points.tolist()}


def point_at(path: ReferencePath, s: float) -> np.ndarray:
    """The path point at arclength ``s`` (piecewise-linear interpolation)."""
    if not (0.0 <= s <= path.length + 1e-12):
        raise ValueError(f"arclength {s} outside [0, {path.length}]")
    return _interp(path.points, path.cumulative_arclength, min(s, path.length))


def project_points(path: ReferencePath, p, clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project_point` over an (n, 2) array.

    With ``clamp=False``, points whose closest path point is an endpoint are
    instead measured along the extension of the first/last segment, so ``s``
    may be negative or exceed the path length and the offset is the
    perpendicular distance to that extension.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    a = path.points[:-1]
    d = np.diff(path.points, axis=0)
    seg_len = np.diff(path.cumulative_arclength)
    rel = p[:, None, :] - a[None, :, :]
    u = (rel * d[None]).sum(-1) / (seg_len**2)[None]
    uc = np.clip(u, 0.0, 1.0)
    closest = a[None] + uc[..., None] * d[None]
    dist = np.linalg.norm(p[:, None, :] - closest, axis=-1)
    seg = np.argmin(dist, axis=1)
    rows = np.arange(len(p))
    u_best = uc[rows, seg]
    s = path.cumulative_arclength[seg] + u_best * seg_len[seg]
    dd = d[seg]
    diff = p - closest[rows, seg]
    cross = dd[:, 0] * diff[:, 1] - dd[:, 1] * diff[:, 0]
    offset = np.sign(cross) * dist[rows, seg]

    last = len(seg_len) - 1
    before = (seg == 0) & (u[rows, 0] < 0.0)
    after = (seg == last) & (u[rows, last] > 1.0)
    for mask, k in ((before, 0), (after, last)):
        if not mask.any():
            continue
        rel_k = p[mask] - a[k]
        tangent = d[k] / seg_len[k]
        offset[mask] = tangent[0] * rel_k[:, 1] - tangent[1] * rel_k[:, 0]
        s[mask] = path.cumulative_arclength[k] + rel_k @ tangent
    if clamp:
        s = np.clip(s, 0.0, path.length)
    return s, offset


def project_point(path: ReferencePath, p, clamp: bool = True) -> tuple[float, float]:
    """Arclength of the closest path point and signed lateral offset (left positive)."""
    s, off = project_points(path, np.asarray(p, dtype=np.float64)[None], clamp=clamp)
    return float(s[0]), float(off[0])


@dataclass(frozen=True, eq=False)
class RouteContext:
    route: tuple[int, ...]
    path: ReferencePath
    context: np.ndarray

    @property
    def length(self) -> float:
        return self.path.length

    def lanelet_at(self, s: float) -> int:
        """Route lanelet covering path coordinate ``s``."""
        ends = np.cumsum(self.context[:, 1] - self.context[:, 0])
        j = int(np.searchsorted(ends, s, side="left"))
        return self.route[min(j, len(self.route) - 1)]

    def to_dict(self) -> dict:
        return {
            "route": list(self.route),
            "path": self.path.to_dict(),
            "context": self.context.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouteContext":
        return cls(
            route=tuple(int(x) for x in d["route"]),
            path=ReferencePath(np.asarray(d["path"]["points"])),
            context=np.asarray(d["context"], dtype=np.float64),
        )


def route_from_sequence(
    network: LaneletNetwork, lanelets: Sequence[int], start_s: float, length: float
) -> RouteContext:
    """Build the route context following ``lanelets`` from ``start_s`` for ``length`` meters."""
    rows = []
    pieces = []
    prior = 0.0
    remaining = length
    used = []
    for j, lid in enumerate(lanelets):
        ll = network[lid]
        s0 = start_s if j == 0 else 0.0
        if s0 < 0 or s0 > ll.length:
            raise RouteError(f"start {s0} outside lanelet {lid}")
        avail = ll.length - s0
        take = min(avail, remaining)
        if take <= 0:
            if j == 0:
                # starting exactly at the lanelet end
                continue
            break
        s1 = s0 + take
        rows.append([s0, s1, ll.length, prior])
        used.append(lid)
        cum = ll.arclength
        inner = (cum > s0) & (cum < s1)
        pieces.append(np.vstack([ll.point_at(s0), ll.centerline[inner], ll.point_at(s1)]))
        prior += ll.length
        remaining -= take
        if remaining <= 1e-12:
            break
    if remaining > 1e-9:
        raise RouteError(f"route ends {remaining:.3f} m short of the requested length")
    path = ReferencePath(np.vstack(pieces))
    return RouteContext(route=tuple(used), path=path, context=np.asarray(rows, dtype=np.float64))


_REACH: "weakref.WeakKeyDictionary[LaneletNetwork, dict]" = weakref.WeakKeyDictionary()


def max_reach(network: LaneletNetwork, lid: int) -> float:
    """Longest successor-only travel distance starting at the beginning of ``lid``."""
    memo = _REACH.setdefault(network, {})
    if lid in memo:
        return memo[lid]
    visiting: set[int] = set()

    def visit(x: int) -> float:
        if x in memo:
            return memo[x]
        if x in visiting:
            return math.inf
        visiting.add(x)
        best = max((visit(s) for s in network[x].successors), default=0.0)
        visiting.discard(x)
        memo[x] = network[x].length + best
        return memo[x]

    return visit(lid)


def random_walk(
    network: LaneletNetwork, start_lanelet: int, start_s: float, min_length: float, rng: np.random.Generator
) -> list[int]:
    """Successor-only walk covering ``min_length`` meters from ``start_s``.

    At forks the choice is uniform over successors that can still complete
    the route.
    """
    if start_lanelet not in network.lanelets:
        raise RouteError(f"unknown start lanelet {start_lanelet}")
    if max_reach(network, start_lanelet) - start_s < min_length - 1e-9:
        raise RouteError(
            f"dead end: at most {max_reach(network, start_lanelet) - start_s:.2f} m reachable "
            f"from lanelet {start_lanelet}, need {min_length} m"
        )
    seq = [start_lanelet]
    covered = network[start_lanelet].length - start_s
    while covered < min_length - 1e-12:
        need = min_length - covered
        succ = [s for s in network[seq[-1]].successors if max_reach(network, s) >= need - 1e-9]
        nxt = succ[int(rng.integers(len(succ)))] if len(succ) > 1 else succ[0]
        seq.append(nxt)
        covered += network[nxt].length
    return seq


def plan_route(
    network: LaneletNetwork,
    start_lanelet: int,
    start_s: float,
    min_length: float = 45.0,
    rng_seed: int | np.random.Generator | None = 0,
) -> RouteContext:
    """Random successor walk from (start_lanelet, start_s), truncated to ``min_length``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    seq = random_walk(network, start_lanelet, start_s, min_length, rng)
    return route_from_sequence(network, seq, start_s, min_length)


def iter_edges(network: LaneletNetwork) -> Iterable[tuple[int, int, int]]:
    """(source, target, relation) for every directed lanelet relation.

    Relations: 0 successor, 1 predecessor, 2 adjacent-left, 3 adjacent-right.
    """
    for lid in network.ids:
        ll = network[lid]
        for s in ll.successors:
            yield lid, s, 0
            yield s, lid, 1
    for lid in network.ids:
        ll = network[lid]
        if ll.adjacent_left is not None:
            yield lid, ll.adjacent_left, 2
        if ll.adjacent_right is not None:
            yield lid, ll.adjacent_right, 3
