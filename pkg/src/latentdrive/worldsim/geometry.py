"""Planar geometry helpers: vehicle state, oriented boxes, frame transforms."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import kernels


@dataclass
class VehicleState:
    """Pose and kinematics of one vehicle (SI units, heading in radians)."""

    x: float
    y: float
    heading: float
    v_lon: float = 0.0
    length: float = 4.5
    width: float = 2.0
    steer: float = 0.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("bbox dimensions must be positive")
        if self.v_lon < 0:
            raise ValueError("v_lon must be non-negative")

    @property
    def position(self):
        return (self.x, self.y)

    @property
    def bbox(self):
        return (self.length, self.width)

    def box(self):
        return box_row(self.x, self.y, self.heading, self.length, self.width)

    def copy(self):
        return replace(self)


def box_row(x, y, heading, length, width):
    """Kernel box row ``(cx, cy, cos, sin, half_length, half_width)``."""
    return np.array(
        [x, y, np.cos(heading), np.sin(heading), 0.5 * length, 0.5 * width],
        dtype=np.float64,
    )


def box_rows(poses, length, width):
    """Stack box rows for an ``(n, 3)`` array of ``(x, y, heading)`` poses."""
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3)
    out = np.empty((poses.shape[0], 6))
    out[:, 0] = poses[:, 0]
    out[:, 1] = poses[:, 1]
    out[:, 2] = np.cos(poses[:, 2])
    out[:, 3] = np.sin(poses[:, 2])
    out[:, 4] = 0.5 * np.broadcast_to(length, poses.shape[0])
    out[:, 5] = 0.5 * np.broadcast_to(width, poses.shape[0])
    return out


def box_corners(row):
    """Four corners of a box row, counter-clockwise from front-left."""
    cx, cy, c, s, hl, hw = row
    return np.array(
        [
            [cx + c * hl - s * hw, cy + s * hl + c * hw],
            [cx - c * hl - s * hw, cy - s * hl + c * hw],
            [cx - c * hl + s * hw, cy - s * hl - c * hw],
            [cx + c * hl + s * hw, cy + s * hl - c * hw],
        ]
    )


def collides(a: VehicleState, b: VehicleState) -> bool:
    """Oriented-box overlap (separating axis test); symmetric in its arguments."""
    return bool(kernels.boxes_overlap(a.box(), b.box()[None, :])[0])


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def world_to_frame(points, origin, heading):
    """Express world points in the frame at ``origin`` whose +x axis is ``heading``."""
    p = np.asarray(points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    x = p[..., 0] * c + p[..., 1] * s
    y = -p[..., 0] * s + p[..., 1] * c
    return np.stack([x, y], axis=-1)


def frame_to_world(points, origin, heading):
    p = np.asarray(points, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    x = p[..., 0] * c - p[..., 1] * s + origin[0]
    y = p[..., 0] * s + p[..., 1] * c + origin[1]
    return np.stack([x, y], axis=-1)


class RigidTransform:
    """World-frame rotation by ``angle`` followed by translation ``offset``."""

    def __init__(self, angle, offset):
        self.angle = float(angle)
        self.offset = np.asarray(offset, dtype=np.float64)
        self._rot = rotation(self.angle)

    def points(self, p):
        p = np.asarray(p, dtype=np.float64)
        return p @ self._rot.T + self.offset

    def heading(self, h):
        return h + self.angle

    def boxes(self, rows):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
        out = rows.copy()
        out[:, :2] = self.points(rows[:, :2])
        c, s = np.cos(self.angle), np.sin(self.angle)
        out[:, 2] = rows[:, 2] * c - rows[:, 3] * s
        out[:, 3] = rows[:, 2] * s + rows[:, 3] * c
        return out

    def segments(self, segs):
        segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
        return np.concatenate(
            [self.points(segs[:, :2]), self.points(segs[:, 2:])], axis=1
        )

    def vehicle(self, v: VehicleState) -> VehicleState:
        x, y = self.points([v.x, v.y])
        return replace(v, x=float(x), y=float(y), heading=self.heading(v.heading))
