"""Ego-centric rasterizers for the bird's-eye mask, the lidar grid and the camera.

All three work in the ego frame (+x forward, +y left) so that moving or
rotating the whole world leaves the images unchanged. Image row 0 is the far
end (forward is up) and column 0 is the ego's left.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .. import kernels
from .geometry import box_row, world_to_frame

ROAD_GRAY = 0.35
MARKING_GRAY = 0.85
ROUTE_BLUE = (0.0, 0.0, 1.0)
OBJECT_GREEN = (0.0, 1.0, 0.0)
EGO_RED = (1.0, 0.0, 0.0)

CAM_OFFROAD = (0.30, 0.50, 0.25)
CAM_ROAD = 0.40
CAM_MARKING = 0.90
CAM_VEHICLE = (0.15, 0.25, 0.80)


@lru_cache(maxsize=8)
def bev_grid(size, obs_range):
    """Ego-frame ``(forward, left)`` coordinates of every pixel centre, row-major."""
    res = obs_range / size
    idx = np.arange(size) + 0.5
    f = (0.5 * size - idx) * res
    l = (0.5 * size - idx) * res
    ff, ll = np.meshgrid(f, l, indexing="ij")
    grid = np.stack([ff.ravel(), ll.ravel()], axis=1)
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=8)
def camera_grid(size, fov_deg, near, far):
    """Ground-plane point seen by each camera pixel.

    Rows sample depth geometrically from ``far`` (top) to ``near`` (bottom);
    columns sample the lateral angle across the field of view, left to right.
    """
    u = 1.0 - (np.arange(size) + 0.5) / size
    depth = near * (far / near) ** u
    t = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    half = np.tan(0.5 * np.deg2rad(fov_deg))
    dd, tt = np.meshgrid(depth, t, indexing="ij")
    grid = np.stack([dd.ravel(), (-tt * dd * half).ravel()], axis=1)
    grid.setflags(write=False)
    # lateral pixel footprint, used to keep thin lines visible at distance
    foot = (2.0 * dd * half / size).ravel()
    foot.setflags(write=False)
    return grid, foot


def _ray_dirs(n):
    ang = 2.0 * np.pi * np.arange(n) / n
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


_RAY_CACHE = {}


def ray_dirs(n):
    if n not in _RAY_CACHE:
        d = _ray_dirs(n)
        d.setflags(write=False)
        _RAY_CACHE[n] = d
    return _RAY_CACHE[n]


def _boxes_to_ego(rows, ego):
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    out = rows.copy()
    out[:, :2] = world_to_frame(rows[:, :2], (ego.x, ego.y), ego.heading)
    c, s = np.cos(ego.heading), np.sin(ego.heading)
    out[:, 2] = rows[:, 2] * c + rows[:, 3] * s
    out[:, 3] = -rows[:, 2] * s + rows[:, 3] * c
    return out


def _segments_to_ego(segs, ego):
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
    a = world_to_frame(segs[:, :2], (ego.x, ego.y), ego.heading)
    b = world_to_frame(segs[:, 2:], (ego.x, ego.y), ego.heading)
    return np.concatenate([a, b], axis=1)


def _cull_boxes(rows, radius):
    """Keep ego-frame boxes whose bounding circle reaches within ``radius``."""
    reach = np.hypot(rows[:, 4], rows[:, 5])
    return rows[np.hypot(rows[:, 0], rows[:, 1]) - reach <= radius]


def _cull_segments(segs, radius):
    if segs.shape[0] == 0:
        return segs
    a, b = segs[:, :2], segs[:, 2:]
    e = b - a
    len2 = np.maximum(np.sum(e * e, axis=1), 1e-300)
    t = np.clip(-np.sum(a * e, axis=1) / len2, 0.0, 1.0)
    q = a + t[:, None] * e
    return segs[np.hypot(q[:, 0], q[:, 1]) <= radius]


def _npc_rows(state):
    return np.array([n.vehicle.box() for n in state.npcs]).reshape(-1, 6)


def _route_segments(state, span):
    segs = state.ego_route.window_segments(state.ego_s - span, state.ego_s + span)
    return _segments_to_ego(segs, state.ego)


def _paint(img, hit, color):
    img[hit] = color


def render_mask(state):
    """Four-layer semantic mask: map, routing, other vehicles, ego."""
    cfg = state.config
    size = cfg.image_size
    res = cfg.obs_range / size
    grid = bev_grid(size, cfg.obs_range)
    radius = 0.75 * cfg.obs_range
    img = np.zeros((size * size, 3), dtype=np.float32)
    ego = state.ego

    road = _cull_boxes(_boxes_to_ego(state.map.drivable_region, ego), radius)
    if road.shape[0]:
        _paint(img, kernels.points_in_boxes(grid, road) >= 0, ROAD_GRAY)
    marks = _cull_segments(_segments_to_ego(state.map.markings, ego), radius)
    if marks.shape[0]:
        _paint(img, kernels.points_near_segments(grid, marks, 0.5 * res), MARKING_GRAY)

    route = _cull_segments(_route_segments(state, cfg.obs_range), radius)
    if route.shape[0]:
        _paint(img, kernels.points_near_segments(grid, route, max(1.0, res)), ROUTE_BLUE)

    k_hist, stride = cfg.history_length, cfg.history_stride
    for k in range(k_hist, 0, -1):
        poses = [n.history[-1 - k * stride] for n in state.npcs if len(n.history) > k * stride]
        if not poses:
            continue
        rows = np.array([box_row(x, y, h, cfg.vehicle_length, cfg.vehicle_width) for x, y, h in poses])
        rows = _cull_boxes(_boxes_to_ego(rows, ego), radius)
        if rows.shape[0]:
            g = 1.0 - k / (k_hist + 1.0)
            _paint(img, kernels.points_in_boxes(grid, rows) >= 0, (0.0, g, 0.0))

    npcs = _cull_boxes(_boxes_to_ego(_npc_rows(state), ego), radius)
    if npcs.shape[0]:
        _paint(img, kernels.points_in_boxes(grid, npcs) >= 0, OBJECT_GREEN)

    ego_row = np.array([[0.0, 0.0, 1.0, 0.0, 0.5 * ego.length, 0.5 * ego.width]])
    _paint(img, kernels.points_in_boxes(grid, ego_row) >= 0, EGO_RED)
    return img.reshape(size, size, 3)


def lidar_ranges(state):
    """First-hit distance of each ray against NPC boxes (inf when clear)."""
    cfg = state.config
    dirs = ray_dirs(cfg.lidar_rays)
    boxes = _cull_boxes(_boxes_to_ego(_npc_rows(state), state.ego), cfg.lidar_range)
    if boxes.shape[0] == 0:
        return np.full(cfg.lidar_rays, np.inf)
    return kernels.raycast_boxes(np.zeros(2), dirs, boxes, cfg.lidar_range)


def render_lidar(state):
    """Planar lidar sweep projected onto the ground grid.

    Every ray returns ground points on concentric rings (green) until its first
    vehicle hit, which is painted red. The planned route is painted blue.
    """
    cfg = state.config
    size = cfg.image_size
    res = cfg.obs_range / size
    grid = bev_grid(size, cfg.obs_range)
    img = np.zeros((size * size, 3), dtype=np.float32)
    ranges = lidar_ranges(state)
    dirs = ray_dirs(cfg.lidar_rays)

    rings = np.arange(cfg.lidar_ring_spacing, cfg.lidar_range + 1e-9, cfg.lidar_ring_spacing)
    seen = rings[None, :] < ranges[:, None]
    ground = (rings[None, :, None] * dirs[:, None, :])[seen]
    flat = _pixel_index(ground, size, res)
    img[flat, 1] = 1.0

    hit = np.isfinite(ranges)
    if hit.any():
        flat = _pixel_index(ranges[hit, None] * dirs[hit], size, res)
        img[flat, 0] = 1.0
        img[flat, 1] = 0.0

    route = _cull_segments(_route_segments(state, cfg.obs_range), 0.75 * cfg.obs_range)
    if route.shape[0]:
        on_route = kernels.points_near_segments(grid, route, max(1.0, res)) & (img[:, 0] == 0.0)
        img[on_route] = ROUTE_BLUE
    return img.reshape(size, size, 3)


def _pixel_index(points, size, res):
    """Flat pixel index of each ego-frame point that falls inside the grid."""
    r = np.floor(0.5 * size - points[:, 0] / res).astype(np.int64)
    c = np.floor(0.5 * size - points[:, 1] / res).astype(np.int64)
    ok = (r >= 0) & (r < size) & (c >= 0) & (c < size)
    return r[ok] * size + c[ok]


def render_camera(state):
    """Front-facing ground-plane view restricted to the forward cone."""
    cfg = state.config
    size = cfg.image_size
    grid, foot = camera_grid(size, cfg.camera_fov_deg, cfg.camera_near, cfg.camera_far)
    radius = cfg.camera_far / np.cos(0.5 * np.deg2rad(cfg.camera_fov_deg))
    ego = state.ego
    img = np.empty((size * size, 3), dtype=np.float32)
    img[:] = CAM_OFFROAD

    road = _cull_boxes(_boxes_to_ego(state.map.drivable_region, ego), radius)
    if road.shape[0]:
        img[kernels.points_in_boxes(grid, road) >= 0] = CAM_ROAD
    marks = _cull_segments(_segments_to_ego(state.map.markings, ego), radius)
    if marks.shape[0]:
        # distance to the nearest marking, compared against a per-pixel width
        near = np.zeros(grid.shape[0], dtype=bool)
        for w in np.unique(np.round(np.maximum(0.12, 0.5 * foot), 2)):
            sel = np.round(np.maximum(0.12, 0.5 * foot), 2) == w
            near[sel] = kernels.points_near_segments(grid[sel], marks, float(w))
        img[near] = CAM_MARKING
    npcs = _cull_boxes(_boxes_to_ego(_npc_rows(state), ego), radius)
    if npcs.shape[0]:
        img[kernels.points_in_boxes(grid, npcs) >= 0] = CAM_VEHICLE
    return img.reshape(size, size, 3)


def render_observation(state):
    from .env import Observation

    return Observation(camera=render_camera(state), lidar=render_lidar(state))
