"""Procedural lanelet networks and an IDM-driven longitudinal traffic simulator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lanes import Lanelet, LaneletNetwork

TEMPLATES = ("straight", "curve", "merge", "intersection", "grid")
LANE_WIDTH = 3.5


class CollisionError(ValueError):
    """Bumper-to-bumper gap is not positive."""


# -- network templates ---------------------------------------------------------


def _line(p0, p1, step: float = 5.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(1, int(np.ceil(np.linalg.norm(p1 - p0) / step)))
    u = np.linspace(0.0, 1.0, n + 1)[:, None]
    return p0 + u * (p1 - p0)


def _arc(center, radius: float, a0: float, a1: float, step: float = 2.0) -> np.ndarray:
    n = max(2, int(np.ceil(abs(a1 - a0) * radius / step)))
    ang = np.linspace(a0, a1, n + 1)
    return np.asarray(center, float) + radius * np.c_[np.cos(ang), np.sin(ang)]


def _bezier(p0, d0, p1, d1, n: int = 12) -> np.ndarray:
    """Cubic Bezier from p0 (leaving along d0) to p1 (arriving along d1)."""
    p0, p1, d0, d1 = (np.asarray(x, float) for x in (p0, p1, d0, d1))
    k = 0.5 * np.linalg.norm(p1 - p0)
    c0, c1 = p0 + k * d0, p1 - k * d1
    u = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - u) ** 3 * p0 + 3 * (1 - u) ** 2 * u * c0 + 3 * (1 - u) * u**2 * c1 + u**3 * p1


def _rotate(points: np.ndarray, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return points @ np.array([[c, s], [-s, c]])


def _assemble(polylines: list[np.ndarray], theta: float = 0.0, adjacency=None) -> LaneletNetwork:
    """Lanelets from polylines; successors are inferred from coincident endpoints."""
    polys = [_rotate(np.asarray(p, float), theta) for p in polylines]
    starts: dict[tuple, list[int]] = {}
    for i, p in enumerate(polys):
        starts.setdefault(tuple(np.round(p[0], 6)), []).append(i)
    adjacency = adjacency or {}
    lanelets = {}
    for i, p in enumerate(polys):
        succ = [j + 1 for j in starts.get(tuple(np.round(p[-1], 6)), []) if j != i]
        # snap so successor starts coincide exactly
        for j in succ:
            polys[j - 1][0] = p[-1]
        left, right = adjacency.get(i, (None, None))
        lanelets[i + 1] = dict(
            centerline=p,
            successors=tuple(succ),
            adjacent_left=None if left is None else left + 1,
            adjacent_right=None if right is None else right + 1,
        )
    return LaneletNetwork(
        {lid: Lanelet(id=lid, width=LANE_WIDTH, **kw) for lid, kw in lanelets.items()}
    )


def _straight(rng) -> LaneletNetwork:
    lengths = rng.uniform(32.0, 40.0, size=3)
    x = np.concatenate([[0.0], np.cumsum(lengths)])
    polys = [_line((x[i], 0.0), (x[i + 1], 0.0)) for i in range(3)]
    return _assemble(polys, theta=rng.uniform(0, 2 * np.pi))


def _curve(rng) -> LaneletNetwork:
    radius = rng.uniform(25.0, 50.0)
    sweep = np.deg2rad(rng.uniform(45.0, 90.0)) * rng.choice([-1.0, 1.0])
    l0, l3 = rng.uniform(25.0, 35.0, size=2)
    p0 = _line((-l0, 0.0), (0.0, 0.0))
    center = np.array([0.0, radius * np.sign(sweep)])
    a0 = -np.pi / 2 * np.sign(sweep)
    arc1 = _arc(center, radius, a0, a0 + sweep / 2)
    arc2 = _arc(center, radius, a0 + sweep / 2, a0 + sweep)
    end = arc2[-1]
    heading = sweep
    p3 = _line(end, end + l3 * np.array([np.cos(heading), np.sin(heading)]))
    return _assemble([p0, arc1, arc2, p3], theta=rng.uniform(0, 2 * np.pi))


def _merge(rng) -> LaneletNetwork:
    la, lm, le = rng.uniform(30.0, 40.0, size=3)
    offset = rng.uniform(8.0, 14.0)
    main_in = _line((-la, 0.0), (0.0, 0.0))
    ramp = _bezier((-la, -offset), (1.0, 0.0), (0.0, 0.0), (1.0, 0.0), n=16)
    merged = _line((0.0, 0.0), (lm, 0.0))
    exit_ = _line((lm, 0.0), (lm + le, 0.0))
    return _assemble([main_in, ramp, merged, exit_], theta=rng.uniform(0, 2 * np.pi))


def _intersection(rng) -> LaneletNetwork:
    half = 8.0
    w = LANE_WIDTH / 2
    arms = [np.array(v, float) for v in ((1, 0), (0, 1), (-1, 0), (0, -1))]
    arm_len = rng.uniform(30.0, 40.0, size=4)
    polys: list[np.ndarray] = []
    incoming, outgoing = {}, {}
    for k, a in enumerate(arms):
        d_in = -a
        rn_in = np.array([d_in[1], -d_in[0]])
        incoming[k] = len(polys)
        polys.append(_line(a * (half + arm_len[k]) + rn_in * w, a * half + rn_in * w))
        rn_out = np.array([a[1], -a[0]])
        outgoing[k] = len(polys)
        polys.append(_line(a * half + rn_out * w, a * (half + arm_len[k]) + rn_out * w))
    for k, a in enumerate(arms):
        for m, b in enumerate(arms):
            if m == k:
                continue
            start, end = polys[incoming[k]][-1], polys[outgoing[m]][0]
            if np.allclose(b, -a):
                polys.append(_line(start, end, step=2.0))
            else:
                polys.append(_bezier(start, -a, end, b))
    adjacency = {incoming[k]: (outgoing[k], None) for k in range(4)}
    adjacency.update({outgoing[k]: (incoming[k], None) for k in range(4)})
    return _assemble(polys, theta=rng.uniform(0, 2 * np.pi), adjacency=adjacency)


def _grid(rng) -> LaneletNetwork:
    spacing = rng.uniform(45.0, 55.0)
    half = 6.0
    lead = rng.uniform(30.0, 40.0)
    nodes = [0.0, spacing]
    polys: list[np.ndarray] = []
    # eastbound rows and northbound columns, split at the junction boxes
    for fixed in nodes:
        xs = [-lead] + [c for n in nodes for c in (n - half, n + half)] + [nodes[-1] + lead]
        for i in range(0, len(xs), 2):
            polys.append(_line((xs[i], fixed), (xs[i + 1], fixed)))
            polys.append(_line((fixed, xs[i]), (fixed, xs[i + 1])))
    for x in nodes:
        for y in nodes:
            polys.append(_line((x - half, y), (x + half, y), step=2.0))
            polys.append(_line((x, y - half), (x, y + half), step=2.0))
            polys.append(_bezier((x - half, y), (1, 0), (x, y + half), (0, 1)))
            polys.append(_bezier((x, y - half), (0, 1), (x + half, y), (1, 0)))
    return _assemble(polys, theta=rng.uniform(0, 2 * np.pi))


_BUILDERS = {
    "straight": _straight,
    "curve": _curve,
    "merge": _merge,
    "intersection": _intersection,
    "grid": _grid,
}


def generate_network(seed: int, template: str) -> LaneletNetwork:
    """Seeded procedural network for one of :data:`TEMPLATES`."""
    if template not in _BUILDERS:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    return _BUILDERS[template](np.random.default_rng(seed))


# -- car following -------------------------------------------------------------


@dataclass(frozen=True)
class IDMParams:
    v0: float = 13.9
    T: float = 1.5
    s0: float = 2.0
    a: float = 1.5
    b: float = 2.0
    a_max: float = 2.5
    b_max: float = 4.5
    delta: float = 4.0


def idm_acceleration(gap: float, v: float, v_lead: float, params: IDMParams = IDMParams(), v0: float | None = None) -> float:
    """Intelligent Driver Model acceleration, clamped to [-b_max, a_max]."""
    if gap <= 0:
        raise CollisionError(f"non-positive gap {gap}")
    v0 = params.v0 if v0 is None else v0
    s_star = params.s0 + v * params.T + v * (v - v_lead) / (2.0 * np.sqrt(params.a * params.b))
    s_star = max(s_star, 0.0)
    acc = params.a * (1.0 - (v / v0) ** params.delta - (s_star / gap) ** 2)
    return float(np.clip(acc, -params.b_max, params.a_max))


# -- traces --------------------------------------------------------------------


@dataclass(frozen=True)
class VehicleState:
    id: int
    lanelet_id: int
    s_on_lanelet: float
    speed: float
    accel: float
    length: float
    width: float

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "lanelet": self.lanelet_id,
            "s": self.s_on_lanelet,
            "speed": self.speed,
            "accel": self.accel,
            "len": self.length,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleState":
        return cls(
            id=int(d["id"]),
            lanelet_id=int(d["lanelet"]),
            s_on_lanelet=float(d["s"]),
            speed=float(d["speed"]),
            accel=float(d["accel"]),
            length=float(d["len"]),
            width=float(d["width"]),
        )


@dataclass(frozen=True, eq=False)
class ScenarioTrace:
    network: LaneletNetwork
    dt: float
    frames: tuple[tuple[float, tuple[VehicleState, ...]], ...]
    scenario_id: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    def vehicles(self, k: int) -> tuple[VehicleState, ...]:
        return self.frames[k][1]

    def dumps(self) -> str:
        head = dict(self.network.to_dict(), dt=self.dt, scenario_id=self.scenario_id)
        lines = [json.dumps(head, sort_keys=True)]
        for t, vehicles in self.frames:
            lines.append(json.dumps({"t": t, "vehicles": [v.to_dict() for v in vehicles]}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ScenarioTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        network = LaneletNetwork.from_dict(head)
        frames = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            frames.append((float(rec["t"]), tuple(VehicleState.from_dict(v) for v in rec["vehicles"])))
        return cls(network, float(head["dt"]), tuple(frames), int(head.get("scenario_id", 0)))

    @classmethod
    def load(cls, path) -> "ScenarioTrace":
        return cls.loads(Path(path).read_text())


# -- simulation ----------------------------------------------------------------


@dataclass(frozen=True)
class SpawnConfig:
    rate: float = 0.3  # vehicles per second per entry lanelet
    length_range: tuple[float, float] = (3.5, 9.0)
    width_range: tuple[float, float] = (1.7, 2.5)
    desired_speed_range: tuple[float, float] = (0.7, 1.0)  # fraction of v0
    initial_speed_range: tuple[float, float] = (0.6, 1.0)  # fraction of desired speed
    warmup: float = 20.0
    lookahead: float = 120.0
    max_vehicles: int = 64
    idm: IDMParams = field(default_factory=IDMParams)


@dataclass
class _Agent:
    id: int
    plan: list[int]  # plan[0] is the current lanelet
    s: float
    speed: float
    accel: float
    length: float
    width: float
    v0: float


class TrafficSimulator:
    """Stateful stepping simulator; :func:`simulate` wraps it for whole traces."""

    def __init__(self, network: LaneletNetwork, seed: int, config: SpawnConfig = SpawnConfig()):
        self.network = network
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.agents: list[_Agent] = []
        self._next_id = 1

    def _extend_plan(self, agent: _Agent) -> None:
        ahead = self.network[agent.plan[0]].length - agent.s
        for lid in agent.plan[1:]:
            ahead += self.network[lid].length
        while ahead < self.config.lookahead:
            succ = self.network[agent.plan[-1]].successors
            if not succ:
                return
            nxt = succ[int(self.rng.integers(len(succ)))] if len(succ) > 1 else succ[0]
            agent.plan.append(nxt)
            ahead += self.network[nxt].length

    def _by_lanelet(self) -> dict[int, list[_Agent]]:
        out: dict[int, list[_Agent]] = {}
        for ag in self.agents:
            out.setdefault(ag.plan[0], []).append(ag)
        for lst in out.values():
            lst.sort(key=lambda a: (a.s, a.id))
        return out

    def _leader(self, agent: _Agent, occupancy: dict[int, list[_Agent]]) -> tuple[float, float]:
        """(bumper gap, leader speed); gap is inf on a free road."""
        best_gap, best_v = np.inf, 0.0
        offset = 0.0
        for depth, lid in enumerate(agent.plan):
            for other in occupancy.get(lid, ()):
                if other is agent:
                    continue
                if depth == 0 and (other.s, other.id) <= (agent.s, agent.id):
                    continue
                gap = offset + other.s - other.length / 2 - (agent.s + agent.length / 2)
                if gap < best_gap:
                    best_gap, best_v = gap, other.speed
            if np.isfinite(best_gap):
                break
            offset += self.network[lid].length
            if offset - agent.s > self.config.lookahead:
                break
        # zipper merge: vehicles on sibling lanelets closer to the shared successor go first
        if len(agent.plan) > 1:
            nxt = agent.plan[1]
            remaining = self.network[agent.plan[0]].length - agent.s
            for sib in self.network.predecessors[nxt]:
                if sib == agent.plan[0]:
                    continue
                for other in occupancy.get(sib, ()):
                    r_other = self.network[sib].length - other.s
                    if (r_other, other.id) < (remaining, agent.id):
                        gap = remaining - r_other - (agent.length + other.length) / 2
                        if gap < best_gap:
                            best_gap, best_v = gap, other.speed
        return best_gap, best_v

    def _try_spawn(self, occupancy: dict[int, list[_Agent]]) -> None:
        cfg = self.config
        for entry in self.network.entries:
            if self.rng.random() >= cfg.rate * self._dt:
                continue
            length = float(self.rng.uniform(*cfg.length_range))
            width = float(self.rng.uniform(*cfg.width_range))
            v0 = cfg.idm.v0 * float(self.rng.uniform(*cfg.desired_speed_range))
            speed = v0 * float(self.rng.uniform(*cfg.initial_speed_range))
            if len(self.agents) >= cfg.max_vehicles:
                continue
            cand = _Agent(self._next_id, [entry], length / 2, speed, 0.0, length, width, v0)
            if cand.s > self.network[entry].length:
                continue
            self._extend_plan(cand)
            gap, v_lead = self._leader(cand, occupancy)
            need = cfg.idm.s0 + 0.5 * speed * cfg.idm.T
            if gap < need:
                continue  # overcrowded entry: drop the request
            self._next_id += 1
            self.agents.append(cand)
            occupancy.setdefault(entry, []).insert(0, cand)

    def step(self, dt: float) -> None:
        self._dt = dt
        idm = self.config.idm
        occupancy = self._by_lanelet()
        updates = []
        for ag in self.agents:
            gap, v_lead = self._leader(ag, occupancy)
            if not np.isfinite(gap):
                gap, v_lead = 1e9, ag.speed
            acc = idm_acceleration(gap, ag.speed, v_lead, idm, ag.v0) if gap > 0 else -idm.b_max
            updates.append(acc)
        survivors = []
        for ag, acc in zip(self.agents, updates):
            v = max(0.0, ag.speed + acc * dt)
            ag.accel = (v - ag.speed) / dt
            ag.speed = v
            ag.s += v * dt
            alive = True
            while ag.s > self.network[ag.plan[0]].length:
                ag.s -= self.network[ag.plan[0]].length
                ag.plan.pop(0)
                if not ag.plan:
                    alive = False
                    break
            if alive:
                self._extend_plan(ag)
                survivors.append(ag)
        self.agents = survivors
        self._resolve_overlaps()
        self._try_spawn(self._by_lanelet())

    def _resolve_overlaps(self) -> None:
        for lst in self._by_lanelet().values():
            for follower, leader in zip(lst[-2::-1], lst[::-1]):
                limit = leader.s - (leader.length + follower.length) / 2
                if follower.s > limit:
                    follower.s = max(limit, 0.0)
                    follower.speed = min(follower.speed, leader.speed)

    def states(self) -> tuple[VehicleState, ...]:
        return tuple(
            VehicleState(ag.id, ag.plan[0], float(ag.s), float(ag.speed), float(ag.accel), ag.length, ag.width)
            for ag in sorted(self.agents, key=lambda a: a.id)
        )


def simulate(
    network: LaneletNetwork,
    seed: int,
    duration: float,
    dt: float = 0.04,
    spawn_config: SpawnConfig = SpawnConfig(),
    scenario_id: int = 0,
) -> ScenarioTrace:
    """Warm up, then record ``round(duration / dt)`` frames spaced by ``dt``."""
    if dt <= 0 or duration < dt:
        raise ValueError("need dt > 0 and duration >= dt")
    sim = TrafficSimulator(network, seed, spawn_config)
    sim._dt = dt
    for _ in range(int(round(spawn_config.warmup / dt))):
        sim.step(dt)
    frames = []
    n = int(round(duration / dt))
    for k in range(n):
        frames.append((round(k * dt, 9), sim.states()))
        if k + 1 < n:
            sim.step(dt)
    return ScenarioTrace(network, dt, tuple(frames), scenario_id)


def vehicle_pose(network: LaneletNetwork, v: VehicleState) -> tuple[np.ndarray, float]:
    """World position and heading of a vehicle center."""
    ll = network[v.lanelet_id]
    return ll.point_at(v.s_on_lanelet), ll.heading_at(v.s_on_lanelet)


def kinematic_trace(
    network: LaneletNetwork,
    vehicles: list[VehicleState],
    num_frames: int,
    dt: float = 0.04,
    scenario_id: int = 0,
) -> ScenarioTrace:
    """Constant-speed replay: each vehicle follows first successors and leaves at a dead end."""
    frames = []
    state = list(vehicles)
    for k in range(num_frames):
        frames.append((round(k * dt, 9), tuple(state)))
        moved = []
        for v in state:
            lid, s = v.lanelet_id, v.s_on_lanelet + v.speed * dt
            while s > network[lid].length and network[lid].successors:
                s -= network[lid].length
                lid = network[lid].successors[0]
            if s <= network[lid].length:
                moved.append(VehicleState(v.id, lid, s, v.speed, 0.0, v.length, v.width))
        state = moved
    return ScenarioTrace(network, dt, tuple(frames), scenario_id)
