"""Seeded 2D urban driving environment.

The ego follows a kinematic bicycle model; NPCs track random routes, keep
distance to leaders, and take turns through junctions (one NPC per junction).
``reset`` and ``step`` are functional: they never mutate the state passed in.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .. import kernels
from ..errors import ConfigurationError, PlacementError, UsageError
from .geometry import VehicleState, box_row, box_rows
from .reward import compute_reward
from .roadmap import MapSpec, Route, generate_map, plan_route


@dataclass(frozen=True)
class EnvConfig:
    map_seed: int = 0
    map_size: float = 200.0
    lane_width: float = 3.5
    npc_count: int = 8
    image_size: int = 64
    obs_range: float = 32.0
    max_episode_length: int = 500
    dt: float = 0.1
    a_max: float = 3.0
    alpha_max: float = 0.3
    wheelbase: float = 2.5
    max_speed: float = 30.0
    desired_speed: float = 8.0
    out_of_lane_margin: float = 0.5
    vehicle_length: float = 4.5
    vehicle_width: float = 2.0
    npc_cruise_speed: float = 5.0
    npc_accel: float = 2.0
    npc_headway: float = 20.0
    npc_min_gap: float = 1.0
    lidar_rays: int = 360
    lidar_range: float = 20.0
    lidar_ring_spacing: float = 2.0
    camera_fov_deg: float = 90.0
    camera_near: float = 2.0
    camera_far: float = 40.0
    history_length: int = 3
    history_stride: int = 3
    route_min_length: float = 600.0
    turn_radius: float = 5.0
    zone_radius: float = 10.0
    spawn_clearance: float = 6.0
    placement_retries: int = 200

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("map_seed",):
                continue
            if f.name == "npc_count":
                if v < 0:
                    raise ConfigurationError("npc_count must be >= 0", key=f.name)
            elif f.name in ("history_length",):
                if v < 0:
                    raise ConfigurationError(f"{f.name} must be >= 0", key=f.name)
            elif v <= 0:
                raise ConfigurationError(f"{f.name} must be positive", key=f.name)
        if self.image_size < 8 or self.image_size & (self.image_size - 1):
            raise ConfigurationError("image_size must be a power of two >= 8", key="image_size")


@dataclass
class Observation:
    """Camera-like and lidar-like H x W x 3 images with values in [0, 1]."""

    camera: np.ndarray
    lidar: np.ndarray


@dataclass
class StepResult:
    observation: Observation
    mask: np.ndarray
    reward: float
    reward_breakdown: dict
    done: bool
    done_reason: str = "none"


@dataclass
class NPC:
    vehicle: VehicleState
    route: Route
    s: float
    history: list = field(default_factory=list)


@dataclass
class EnvState:
    config: EnvConfig
    map: MapSpec
    ego: VehicleState
    ego_route: Route
    ego_s: float
    npcs: list
    locks: dict
    rng: np.random.Generator
    step_count: int = 0
    done: bool = False

    @property
    def route_waypoints(self):
        return self.ego_route.points

    def copy(self) -> "EnvState":
        return replace(
            self,
            ego=self.ego.copy(),
            npcs=[NPC(n.vehicle.copy(), n.route, n.s, list(n.history)) for n in self.npcs],
            locks=dict(self.locks),
            rng=copy.deepcopy(self.rng),
        )

    def npc_boxes(self):
        if not self.npcs:
            return np.zeros((0, 6))
        return np.stack([n.vehicle.box() for n in self.npcs])


DONE_REASONS = ("collision", "out_of_lane", "timeout", "none")


def _spawn_range(map_spec, seg, cfg):
    """Arc-length interval on a segment where a vehicle clears both junction zones."""
    margin = cfg.zone_radius + cfg.vehicle_length
    length = map_spec.segment_length(seg)
    if length - 2 * margin <= 0:
        return None
    return margin, length - margin


def _place(state_vehicles, candidate, clearance):
    c = candidate
    for v in state_vehicles:
        if np.hypot(v.x - c.x, v.y - c.y) < v.length + clearance:
            return False
    return True


def _sample_lane_pose(map_spec, cfg, rng):
    for _ in range(50):
        seg = int(rng.integers(len(map_spec.lane_segments)))
        rng_s = _spawn_range(map_spec, seg, cfg)
        if rng_s is not None:
            return seg, float(rng.uniform(*rng_s))
    raise PlacementError("map has no segment long enough to spawn on")


def reset(config: EnvConfig, seed: int, map_spec: MapSpec | None = None):
    """Place ego and NPCs at random feasible lane positions.

    Returns ``(state, result)`` where ``result`` carries the first observation
    and mask with zero reward.
    """
    cfg = config
    if map_spec is None:
        map_spec = generate_map(cfg.map_seed, cfg.map_size, cfg.lane_width)
    rng = np.random.default_rng(seed)

    seg, s0 = _sample_lane_pose(map_spec, cfg, rng)
    route = plan_route(map_spec, seg, rng, cfg.route_min_length, cfg.turn_radius, cfg.zone_radius)
    x, y, h = route.pose_at(s0)
    ego = VehicleState(float(x), float(y), float(h), 0.0, cfg.vehicle_length, cfg.vehicle_width, 0.0)

    placed = [ego]
    npcs = []
    for _ in range(cfg.npc_count):
        for _attempt in range(cfg.placement_retries):
            seg, s = _sample_lane_pose(map_spec, cfg, rng)
            lane = map_spec.lane_segments[seg]
            d = lane[1] - lane[0]
            p = lane[0] + d / np.hypot(*d) * s
            cand = VehicleState(float(p[0]), float(p[1]), float(np.arctan2(d[1], d[0])),
                                cfg.npc_cruise_speed, cfg.vehicle_length, cfg.vehicle_width)
            if _place(placed, cand, cfg.spawn_clearance):
                break
        else:
            raise PlacementError(
                f"could not place {cfg.npc_count} NPCs without overlap "
                f"after {cfg.placement_retries} retries each"
            )
        npc_route = plan_route(map_spec, seg, rng, cfg.route_min_length, cfg.turn_radius, cfg.zone_radius)
        x, y, h = npc_route.pose_at(s)
        cand = replace(cand, x=float(x), y=float(y), heading=float(h))
        placed.append(cand)
        npcs.append(NPC(cand, npc_route, s, [(cand.x, cand.y, cand.heading)]))

    state = EnvState(cfg, map_spec, ego, route, s0, npcs, {}, rng)
    from .render import render_mask, render_observation

    result = StepResult(
        render_observation(state), render_mask(state), 0.0,
        {k: 0.0 for k in ("collision", "v_lon", "fast", "out", "steer", "lat", "const")},
        False, "none",
    )
    return state, result


def _leader_gap(state, i, positions, lengths, reach):
    """Smallest bumper gap to a vehicle ahead on NPC ``i``'s path within ``reach``
    metres (inf if clear). ``positions`` / ``lengths`` index 0 is the ego.
    """
    cfg = state.config
    npc = state.npcs[i]
    others = np.delete(np.arange(len(positions)), i + 1)
    if others.size == 0:
        return np.inf
    s_proj, dist = npc.route.project(positions[others], npc.s - 1.0, npc.s + reach)
    on_path = (dist < 0.5 * cfg.lane_width + 0.5) & (s_proj > npc.s) & (s_proj <= npc.s + reach)
    if not on_path.any():
        return np.inf
    gaps = s_proj[on_path] - npc.s - 0.5 * (npc.vehicle.length + lengths[others][on_path])
    return float(gaps.min())


def _next_junction(npc):
    rear = npc.s - 0.5 * npc.vehicle.length
    for span in npc.route.junctions:
        if span[2] >= rear:
            return span
    return None


def npc_policy(state: EnvState, include_ego=True):
    """Longitudinal commands for every NPC.

    Returns ``(accelerations, locks)``: per-NPC accelerations (m/s^2) for this
    tick and the updated junction reservation table. Each NPC cruises, slows
    in proportion to the gap to whatever is ahead on its path within the
    headway distance, and stops short of a junction it has not reserved. A
    junction is reserved only by the first car in line and only when there is
    room for it beyond the junction, so a holder never waits inside it.
    """
    cfg = state.config
    n = len(state.npcs)
    locks = dict(state.locks)
    if n == 0:
        return np.zeros(0), locks
    positions = np.array(
        [[state.ego.x, state.ego.y]] + [[m.vehicle.x, m.vehicle.y] for m in state.npcs]
    )
    lengths = np.array([state.ego.length] + [m.vehicle.length for m in state.npcs])
    if not include_ego:
        # park the ego far outside every route window
        positions[0] = (1e9, 1e9)

    # release reservations whose holder has fully left the junction zone
    for i, m in enumerate(state.npcs):
        rear = m.s - 0.5 * m.vehicle.length
        for node, _s_in, s_out in m.route.junctions:
            if locks.get(node) == i and rear > s_out:
                del locks[node]

    slope = cfg.npc_cruise_speed / (cfg.npc_headway - cfg.npc_min_gap)
    accel = np.zeros(n)
    for i, m in enumerate(state.npcs):
        front = m.s + 0.5 * m.vehicle.length
        span = _next_junction(m)
        reach = cfg.npc_headway + m.vehicle.length
        if span is not None:
            reach = max(reach, span[2] - m.s + 2.0 * m.vehicle.length + cfg.npc_min_gap)
        far_gap = _leader_gap(state, i, positions, lengths, reach)
        gap = far_gap if far_gap <= cfg.npc_headway + cfg.npc_min_gap else np.inf
        if span is not None:
            node, s_in, s_out = span
            holder = locks.get(node)
            if holder != i:
                exit_room = s_out - front + m.vehicle.length + cfg.npc_min_gap
                if holder is None and s_in - front <= cfg.npc_headway and far_gap > exit_room:
                    locks[node] = i
                else:
                    gap = min(gap, s_in - front)
        v_des = min(cfg.npc_cruise_speed, slope * (gap - cfg.npc_min_gap))
        if v_des < 0.1:
            v_des = 0.0
        v = m.vehicle.v_lon
        v_new = max(0.0, min(v + cfg.npc_accel * cfg.dt, v_des))
        accel[i] = (v_new - v) / cfg.dt
    return accel, locks


def _advance_npcs(state, accel):
    cfg = state.config
    for i, m in enumerate(state.npcs):
        v = max(0.0, m.vehicle.v_lon + accel[i] * cfg.dt)
        s = m.s + v * cfg.dt
        route = m.route
        while route.length - s < 150.0 and not route.truncated:
            route = route.extended(state.map, state.rng)
        if s > 80.0:
            route, shift = route.trimmed(s - 40.0)
            s -= shift
        x, y, h = route.pose_at(s)
        m.vehicle = replace(m.vehicle, x=float(x), y=float(y), heading=float(h), v_lon=v)
        m.route = route
        m.s = s
        m.history.append((m.vehicle.x, m.vehicle.y, m.vehicle.heading))
        keep = cfg.history_length * cfg.history_stride + 1
        if len(m.history) > keep:
            del m.history[: len(m.history) - keep]


def advance_npcs(state: EnvState, include_ego=True) -> EnvState:
    """Advance only the NPCs by one tick (the ego stays put)."""
    new = state.copy()
    accel, locks = npc_policy(new, include_ego=include_ego)
    new.locks = locks
    _advance_npcs(new, accel)
    return new


def npc_overlaps(state) -> bool:
    """True if any two NPC boxes overlap."""
    boxes = state.npc_boxes()
    for i in range(len(boxes) - 1):
        if kernels.boxes_overlap(boxes[i], boxes[i + 1:]).any():
            return True
    return False


def _advance_ego(state, action):
    cfg = state.config
    accel_cmd, steer_cmd = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
    ego = state.ego
    alpha = float(steer_cmd) * cfg.alpha_max
    v = float(np.clip(ego.v_lon + float(accel_cmd) * cfg.a_max * cfg.dt, 0.0, cfg.max_speed))
    heading = ego.heading + v * np.tan(alpha) / cfg.wheelbase * cfg.dt
    x = ego.x + v * np.cos(heading) * cfg.dt
    y = ego.y + v * np.sin(heading) * cfg.dt
    state.ego = replace(ego, x=float(x), y=float(y), heading=float(heading), v_lon=v, steer=alpha)


def _ego_progress(state):
    cfg = state.config
    route = state.ego_route
    s, lat = route.project([[state.ego.x, state.ego.y]], state.ego_s - 5.0, state.ego_s + 15.0)
    s, lat = float(s[0]), float(lat[0])
    while route.length - s < 150.0 and not route.truncated:
        route = route.extended(state.map, state.rng)
    if s > 80.0:
        route, shift = route.trimmed(s - 40.0)
        s -= shift
    state.ego_route = route
    state.ego_s = s
    return lat


def ego_collides(state) -> bool:
    if not state.npcs:
        return False
    return bool(kernels.boxes_overlap(state.ego.box(), state.npc_boxes()).any())


def step(state: EnvState, action, render=True):
    """Advance one tick of ``dt`` seconds; returns ``(new_state, result)``.

    With ``render=False`` the observation and mask of the result are ``None``.
    """
    if state.done:
        raise UsageError("step() called on a finished episode; call reset()")
    cfg = state.config
    new = state.copy()
    accel, locks = npc_policy(new)
    new.locks = locks
    _advance_npcs(new, accel)
    _advance_ego(new, action)
    new.step_count += 1
    lat = _ego_progress(new)

    collision = ego_collides(new)
    out_of_lane = lat > 0.5 * cfg.lane_width + cfg.out_of_lane_margin
    reward, terms = compute_reward(new.ego.v_lon, new.ego.steer, collision, out_of_lane,
                                   cfg.desired_speed)
    if collision:
        reason = "collision"
    elif out_of_lane:
        reason = "out_of_lane"
    elif new.step_count >= cfg.max_episode_length:
        reason = "timeout"
    else:
        reason = "none"
    new.done = reason != "none"

    obs = mask = None
    if render:
        from .render import render_mask, render_observation

        obs = render_observation(new)
        mask = render_mask(new)
    return new, StepResult(obs, mask, reward, terms, new.done, reason)


class DrivingEnv:
    """Stateful convenience wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.map = generate_map(self.config.map_seed, self.config.map_size, self.config.lane_width)
        self.state = None

    def reset(self, seed):
        self.state, result = reset(self.config, seed, self.map)
        return result

    def step(self, action, render=True):
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        self.state, result = step(self.state, action, render)
        return result

    def render(self):
        from .render import render_mask, render_observation

        return render_observation(self.state), render_mask(self.state)


def _transform_route(route: Route, tf) -> Route:
    return Route(route.segments, tf.points(route.points), route.junctions, route.truncated,
                 route.turn_radius, route.zone_radius)


def transform_state(state: EnvState, tf, map_spec: MapSpec | None = None) -> EnvState:
    """The same scene with the whole world moved by the rigid transform ``tf``."""
    new = state.copy()
    new.map = map_spec if map_spec is not None else state.map.transformed(tf)
    new.ego = tf.vehicle(state.ego)
    new.ego_route = _transform_route(state.ego_route, tf)
    npcs = []
    for n in state.npcs:
        hist = [(*tf.points([x, y]), tf.heading(h)) for x, y, h in n.history]
        npcs.append(NPC(tf.vehicle(n.vehicle), _transform_route(n.route, tf), n.s,
                        [(float(x), float(y), float(h)) for x, y, h in hist]))
    new.npcs = npcs
    return new
