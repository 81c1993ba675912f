import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union

from latentdrive.validate import expected_ego_pixels, random_states, render_contract_violations
from latentdrive.worldsim import (
    EnvConfig,
    RigidTransform,
    render_camera,
    render_lidar,
    render_mask,
    reset,
    transform_state,
)
from latentdrive.worldsim.geometry import box_corners
from latentdrive.worldsim.render import CAM_VEHICLE, ROAD_GRAY, lidar_ranges

from conftest import shifted_ego, with_npc


def is_color(img, rgb):
    return np.all(np.isclose(img, np.asarray(rgb, dtype=np.float32)), axis=-1)


def red(img):
    return is_color(img, (1, 0, 0))


@pytest.fixture(scope="module")
def states():
    return random_states(40, seed=5)


def test_shapes_ranges_and_ego_box(states):
    assert render_contract_violations(states) == 0


def test_ego_box_is_centred_and_heading_up(empty_state):
    cfg = empty_state.config
    mask = render_mask(shifted_ego(empty_state))
    inside, edge = expected_ego_pixels(cfg)
    # boxes are closed, so pixel centres exactly on an edge count as inside
    assert np.array_equal(red(mask), inside | edge)
    rows, cols = np.nonzero(inside)
    assert rows.max() - rows.min() > cols.max() - cols.min()
    c = cfg.image_size / 2
    assert rows.min() < c <= rows.max() and cols.min() < c <= cols.max()


def test_ego_paints_over_overlapping_npc(empty_state):
    mask = render_mask(with_npc(empty_state, 1.0, 0.3))
    inside, _ = expected_ego_pixels(empty_state.config)
    assert red(mask)[inside].all()
    assert is_color(mask, (0, 1, 0)).any()


def test_route_is_blue_through_the_ego(empty_state):
    mask = render_mask(empty_state)
    blue = is_color(mask, (0, 0, 1))
    c = empty_state.config.image_size // 2
    assert blue[: c - 6, c - 3:c + 3].any()


def test_lidar_is_hit_free_without_npcs(empty_state):
    lid = render_lidar(empty_state)
    assert lid[..., 0].max() == 0.0
    assert lid[..., 1].max() == 1.0  # ground rings


def test_lidar_dead_ahead_hit_matches_ray_box_oracle(empty_state):
    st_ = with_npc(empty_state, 10.0, 0.0)
    cfg = st_.config
    ranges = lidar_ranges(st_)
    assert ranges[0] == pytest.approx(10.0 - 0.5 * cfg.vehicle_length, abs=1e-9)
    lid = render_lidar(st_)
    res = cfg.obs_range / cfg.image_size
    row = int(np.floor(cfg.image_size / 2 - ranges[0] / res))
    col = cfg.image_size // 2
    assert red(lid)[row, col]
    rows, cols = np.nonzero(red(lid))
    assert rows.max() < cfg.image_size / 2
    assert np.all(np.abs(cols - col) <= cfg.image_size // 8)


def test_lidar_ignores_npc_beyond_range(empty_state):
    st_ = with_npc(empty_state, empty_state.config.lidar_range + 6.0, 0.0)
    assert not red(render_lidar(st_)).any()


def test_npc_behind_is_in_lidar_but_not_camera(empty_state):
    st_ = with_npc(empty_state, -9.0, 0.0)
    assert not is_color(render_camera(st_), CAM_VEHICLE).any()
    assert red(render_lidar(st_)).any()


def test_npc_ahead_left_paints_left_half_of_camera(empty_state):
    st_ = with_npc(empty_state, 14.0, 4.0)
    cam = render_camera(st_)
    rows, cols = np.nonzero(is_color(cam, CAM_VEHICLE))
    assert cols.size > 0
    assert cols.max() < cam.shape[1] / 2


def test_camera_is_deterministic(states):
    for s in states[:5]:
        assert np.array_equal(render_camera(s), render_camera(s))


def test_mask_at_junction_matches_region_oracle():
    state, _ = reset(EnvConfig(npc_count=0), 0)
    j = max(state.map.intersections, key=lambda j: len(j.segments))
    state = state.copy()
    import dataclasses
    state.ego = dataclasses.replace(state.ego, x=j.position[0] + 0.31, y=j.position[1] - 0.17, heading=0.013)
    cfg = state.config
    mask = render_mask(state)
    region = unary_union([Polygon(box_corners(r)) for r in state.map.drivable_region])
    size, res = cfg.image_size, cfg.obs_range / cfg.image_size
    centre = (size / 2 - (np.arange(size) + 0.5)) * res
    e = state.ego
    c, s = np.cos(e.heading), np.sin(e.heading)
    oracle = np.zeros((size, size), dtype=bool)
    for r in range(size):
        for k in range(size):
            f, l = centre[r], centre[k]
            oracle[r, k] = region.contains(Point(e.x + c * f - s * l, e.y + s * f + c * l))
    road = is_color(mask, (ROAD_GRAY,) * 3)
    background = is_color(mask, (0, 0, 0))
    assert not (road & ~oracle).any()
    assert not (background & oracle).any()
    assert (road | background).mean() > 0.8
    # four arms of the junction reach the image border
    mid = size // 2
    assert oracle[0, mid] and oracle[-1, mid] and oracle[mid, 0] and oracle[mid, -1]
    assert not oracle[0, 0] and not oracle[-1, -1]


@given(st.floats(-np.pi, np.pi), st.floats(-1000, 1000), st.floats(-1000, 1000), st.integers(0, 39))
def test_moving_the_world_leaves_images_unchanged(states, angle, tx, ty, k):
    s = states[k]
    moved = transform_state(s, RigidTransform(angle, (tx, ty)))
    for fn in (render_mask, render_lidar, render_camera):
        assert np.array_equal(fn(s), fn(moved))


def test_history_boxes_fade(empty_state):
    from latentdrive.worldsim.env import advance_npcs

    st_ = with_npc(empty_state, 2.0, 4.0, v=5.0)
    for _ in range(12):
        st_ = advance_npcs(st_, include_ego=False)
    cfg = st_.config
    m = render_mask(st_)
    g = m[..., 1]
    faded = (m[..., 0] == 0) & (m[..., 2] == 0) & (g > 0) & (g < 1)
    levels = set(np.round(g[faded], 4).tolist())
    assert levels == {round(1 - k / (cfg.history_length + 1), 4) for k in range(1, cfg.history_length + 1)}
