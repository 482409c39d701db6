"""Replay environment for longitudinal ego control along a fixed route.

Other traffic is replayed from a recorded trace; the ego follows its route
under commanded accelerations. Observations are the latent scene state plus
the ego speed, and the reward mixes progress, collision, speeding and the
expected overlap between the ego's extrapolated footprint and the decoded
occupancy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import no_grad
from .decoder import OccupancyField, decode
from .encoder import batch_graphs, encode_batch
from .graph import extract_graph
from .lanes import RouteContext, max_reach, plan_route, project_points, route_from_sequence
from .loss import trapezoid_weights
from .sim import ScenarioTrace, VehicleState, vehicle_pose
from .training import Model

COMPONENTS = ("path", "collision", "speed", "occupancy")


class EnvError(RuntimeError):
    """Misuse of the environment, e.g. stepping after the episode ended."""


@dataclass(frozen=True)
class RewardWeights:
    w: tuple[float, float, float, float] = (1.0, -100.0, -0.5, -1.0)
    discount: float = 0.95

    def __post_init__(self):
        if len(self.w) != 4 or not np.all(np.isfinite(self.w)):
            raise ValueError("need four finite weights")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")


def reward_occupancy(
    occ: Callable[[np.ndarray, np.ndarray], np.ndarray],
    v_ego: float,
    length: float,
    T: float = 2.4,
    discount: float = 0.95,
    num_steps: int = 60,
    resolution: int = 40,
    zeta: float | None = None,
) -> float:
    """Discounted integral of occupancy over the ego footprint extrapolated at constant speed.

    The window ``[v t - length/2, v t + length/2]`` is cut at the path end
    ``zeta``; the rear half behind the path start stays in, since the field
    is defined there and the ego body occupies it.
    """
    if v_ego < 0:
        raise ValueError("v_ego must be nonnegative")
    if zeta is None:
        zeta = getattr(occ, "zeta", np.inf)
    dt = T / num_steps
    unit = trapezoid_weights(resolution)
    nodes = np.linspace(0.0, 1.0, resolution)
    total = 0.0
    for k in range(num_steps):
        t = k * dt
        lo, hi = v_ego * t - length / 2, min(v_ego * t + length / 2, zeta)
        if hi <= lo:
            continue
        s = lo + (hi - lo) * nodes
        vals = np.broadcast_to(occ(s, np.full_like(s, t)), s.shape)
        total += discount**k * dt * (hi - lo) * float(np.dot(unit, vals))
    return total


@dataclass(frozen=True)
class EnvConfig:
    route_length: float = 45.0
    zeta: float = 45.0
    max_steps: int = 200
    frame_skip: int = 5
    a_cap: float = 4.0
    v_limit: float = 13.9
    goal_bonus: float = 0.0
    ego_length: float = 4.5
    ego_width: float = 1.8
    route_seed: int = 0
    weights: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self):
        if self.route_length < self.zeta:
            raise ValueError("route_length must be at least zeta")


@dataclass
class EnvState:
    frame: int
    s: float
    v: float
    step: int = 0
    done: bool = False
    reason: str | None = None


class ReplayEnv:
    """Ego on a planned route among traffic replayed from ``trace``.

    If ``ego_id`` names a recorded vehicle, the ego takes its place (and
    that vehicle is dropped from the replay); otherwise the ego starts at
    ``start`` = (lanelet id, s on lanelet) with speed ``v0``.
    """

    def __init__(
        self,
        trace: ScenarioTrace,
        model: Model | None,
        config: EnvConfig = EnvConfig(),
        ego_id: int | None = None,
        start_frame: int = 0,
        start: tuple[int, float] | None = None,
        v0: float = 0.0,
    ):
        if model is not None and model.kind != "ours":
            raise ValueError("the environment decodes with the virtual-vehicle model")
        self.trace, self.model, self.config = trace, model, config
        self.ego_id = ego_id
        self.start_frame = start_frame
        if ego_id is not None:
            ego = next((v for v in trace.vehicles(start_frame) if v.id == ego_id), None)
            if ego is None:
                raise ValueError(f"vehicle {ego_id} not in frame {start_frame}")
            start, v0 = (ego.lanelet_id, ego.s_on_lanelet), ego.speed
        if start is None:
            raise ValueError("need ego_id or start")
        self.start, self.v0 = start, float(v0)
        self.route = plan_route(trace.network, start[0], start[1], config.route_length, config.route_seed)
        self._ends = np.cumsum(self.route.context[:, 1] - self.route.context[:, 0])
        self.state = EnvState(start_frame, 0.0, self.v0)

    # -- geometry ----------------------------------------------------------

    def _on_route(self, x: float) -> tuple[int, float]:
        j = min(int(np.searchsorted(self._ends, x, side="right")), len(self.route.route) - 1)
        before = self._ends[j - 1] if j else 0.0
        return j, self.route.context[j, 0] + (x - before)

    def ego_vehicle(self) -> VehicleState:
        j, s_lane = self._on_route(self.state.s)
        lid = self.route.route[j]
        s_lane = min(s_lane, self.trace.network[lid].length)
        return VehicleState(self.ego_id if self.ego_id is not None else -1, lid, s_lane,
                            self.state.v, 0.0, self.config.ego_length, self.config.ego_width)

    def local_context(self) -> RouteContext:
        """Route ahead of the ego, ``zeta`` long or up to the route end if shorter."""
        j, s_lane = self._on_route(self.state.s)
        length = min(self.config.zeta, self.route.length - self.state.s)
        if length < 1e-6:
            j, s_lane = self._on_route(self.route.length - 1e-3)
            length = 1e-3
        return route_from_sequence(self.trace.network, self.route.route[j:], s_lane, length)

    def others(self, frame: int) -> list[VehicleState]:
        return [v for v in self.trace.vehicles(frame) if v.id != self.ego_id]

    def collides(self, frame: int, s: float) -> bool:
        """Longitudinal overlap with any replayed vehicle that sits on the route surface."""
        others = self.others(frame)
        if not others:
            return False
        centers = np.array([vehicle_pose(self.trace.network, v)[0] for v in others])
        pos, off = project_points(self.route.path, centers, clamp=False)
        for v, p, o in zip(others, pos, off):
            lid = self.route.route[self._on_route(float(np.clip(p, 0, self.route.length)))[0]]
            if abs(o) <= self.trace.network[lid].width / 2 and abs(p - s) < (v.length + self.config.ego_length) / 2:
                return True
        return False

    # -- episode -------------------------------------------------------------

    def occupancy_field(self) -> OccupancyField | None:
        if self.model is None:
            return None
        with no_grad():
            z, _ = self._encode()
            eta = decode(z, self.model.decoder)
        return OccupancyField.from_decoder(eta, self.model.decoder)

    def _encode(self):
        ctx = self.local_context()
        graph = extract_graph(self.trace.network, self.others(self.state.frame) + [self.ego_vehicle()])
        return encode_batch(batch_graphs([(graph, ctx)]), self.model.encoder), ctx

    def observation(self) -> np.ndarray:
        if self.model is None:
            return np.array([self.state.v])
        with no_grad():
            z, _ = self._encode()
        return np.concatenate([z.data.reshape(-1).astype(np.float64), [self.state.v]])

    def reset(self) -> np.ndarray:
        self.state = EnvState(self.start_frame, 0.0, self.v0)
        return self.observation()

    def step(self, accel: float):
        """Advance one control step; returns (observation, reward, done, info)."""
        st, cfg = self.state, self.config
        if st.done:
            raise EnvError("episode is over; call reset()")
        if abs(accel) > cfg.a_cap:
            raise ValueError(f"|accel| {accel} exceeds cap {cfg.a_cap}")
        dt = self.trace.dt
        s_before = st.s
        collision = False
        goal = min(cfg.route_length, self.route.length) - 1e-6
        for _ in range(cfg.frame_skip):
            if st.frame + 1 >= len(self.trace):
                break
            st.v = max(0.0, st.v + accel * dt)
            st.s += st.v * dt
            st.frame += 1
            if self.collides(st.frame, st.s):
                collision = True
                break
            if st.s >= goal:
                break
        st.s = min(st.s, self.route.length)
        st.step += 1
        if collision:
            st.done, st.reason = True, "collision"
        elif st.s >= goal:
            st.done, st.reason = True, "goal"
        elif st.step >= cfg.max_steps or st.frame + 1 >= len(self.trace):
            st.done, st.reason = True, "timeout"
        occ_field = self.occupancy_field()
        r_occ = 0.0
        if occ_field is not None:
            r_occ = reward_occupancy(occ_field, st.v, cfg.ego_length, occ_field.horizon,
                                     cfg.weights.discount, zeta=occ_field.zeta)
        components = {
            "path": st.s - s_before,
            "collision": 1.0 if collision else 0.0,
            "speed": max(0.0, st.v - cfg.v_limit),
            "occupancy": r_occ,
        }
        reward = float(np.dot(cfg.weights.w, [components[c] for c in COMPONENTS]))
        if st.reason == "goal":
            reward += cfg.goal_bonus
        info = {"components": components, "reason": st.reason, "frame": st.frame, "s": st.s}
        return self.observation(), reward, st.done, info


def run_episode(env: ReplayEnv, policy: Callable[[np.ndarray, int], float]) -> list[dict]:
    """Roll ``policy(observation, step)`` to termination and log every step."""
    obs = env.reset()
    log = []
    while not env.state.done:
        a = float(policy(obs, env.state.step))
        obs, reward, done, info = env.step(a)
        log.append({
            "step": env.state.step, "t": env.trace.frames[env.state.frame][0], "s": env.state.s,
            "v": env.state.v, "accel": a, "reward": reward, "done": done, **info,
        })
    return log


def make_policy(spec: str, script: Sequence[float] | None = None) -> Callable[[np.ndarray, int], float]:
    """``idle``, ``constant:A`` or ``script`` (accelerations per step, then 0)."""
    if spec == "idle":
        return lambda obs, k: 0.0
    if spec.startswith("constant:"):
        a = float(spec.split(":", 1)[1])
        return lambda obs, k: a
    if spec.startswith("script"):
        seq = list(script or [])
        return lambda obs, k: seq[k] if k < len(seq) else 0.0
    raise ValueError(f"unknown policy {spec!r}")


def default_ego(trace: ScenarioTrace, frame: int, config: EnvConfig) -> int | None:
    """Lowest-id vehicle in ``frame`` with enough road ahead for the route."""
    need = config.route_length
    for v in sorted(trace.vehicles(frame), key=lambda v: v.id):
        if max_reach(trace.network, v.lanelet_id) - v.s_on_lanelet >= need:
            return v.id
    return None

