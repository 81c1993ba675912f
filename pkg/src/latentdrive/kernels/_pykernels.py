"""Pure-numpy fallback for the compiled geometry kernels.

Same signatures and same arithmetic order as ``_ckernels.pyx``.
"""

import numpy as np


def points_in_boxes(points, boxes):
    n = points.shape[0]
    if boxes.shape[0] == 0:
        return np.full(n, -1, dtype=np.int64)
    dx = points[:, None, 0] - boxes[None, :, 0]
    dy = points[:, None, 1] - boxes[None, :, 1]
    lx = dx * boxes[None, :, 2] + dy * boxes[None, :, 3]
    ly = -dx * boxes[None, :, 3] + dy * boxes[None, :, 2]
    inside = (np.abs(lx) <= boxes[None, :, 4]) & (np.abs(ly) <= boxes[None, :, 5])
    m = boxes.shape[0]
    last = m - 1 - np.argmax(inside[:, ::-1], axis=1)
    return np.where(inside.any(axis=1), last, -1).astype(np.int64)


def points_near_segments(points, segs, half_width):
    n = points.shape[0]
    if segs.shape[0] == 0:
        return np.zeros(n, dtype=bool)
    ex = segs[:, 2] - segs[:, 0]
    ey = segs[:, 3] - segs[:, 1]
    len2 = ex * ex + ey * ey
    px = points[:, None, 0]
    py = points[:, None, 1]
    safe = np.where(len2 > 0.0, len2, 1.0)
    t = ((px - segs[None, :, 0]) * ex + (py - segs[None, :, 1]) * ey) / safe
    t = np.where(len2 > 0.0, np.clip(t, 0.0, 1.0), 0.0)
    qx = segs[None, :, 0] + t * ex - px
    qy = segs[None, :, 1] + t * ey - py
    d2 = qx * qx + qy * qy
    return (d2 <= half_width * half_width).any(axis=1)


def _slab(o, d, h, lo, hi):
    zero = d == 0.0
    safe = np.where(zero, 1.0, d)
    t0 = (-h - o) / safe
    t1 = (h - o) / safe
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    blocked = zero & (np.abs(o) > h)
    lo = np.where(zero, np.where(blocked, np.inf, lo), np.maximum(lo, near))
    hi = np.where(zero, np.where(blocked, -np.inf, hi), np.minimum(hi, far))
    return lo, hi


def raycast_boxes(ox, oy, dirs, boxes, max_range):
    r = dirs.shape[0]
    out = np.full(r, np.inf)
    if boxes.shape[0] == 0:
        return out
    dxw = dirs[:, None, 0]
    dyw = dirs[:, None, 1]
    c = boxes[None, :, 2]
    s = boxes[None, :, 3]
    rx = ox - boxes[None, :, 0]
    ry = oy - boxes[None, :, 1]
    lox = rx * c + ry * s
    loy = -rx * s + ry * c
    ldx = dxw * c + dyw * s
    ldy = -dxw * s + dyw * c
    lo = np.full(ldx.shape, -np.inf)
    hi = np.full(ldx.shape, np.inf)
    lo, hi = _slab(lox, ldx, boxes[None, :, 4], lo, hi)
    lo, hi = _slab(loy, ldy, boxes[None, :, 5], lo, hi)
    hit = ~((lo > hi) | (hi < 0.0))
    t = np.where(hit, np.maximum(lo, 0.0), np.inf)
    best = t.min(axis=1)
    return np.where(best <= max_range, best, out)


def _corners(b):
    cx, cy, c, s, hl, hw = (b[..., k] for k in range(6))
    return np.stack(
        [
            np.stack([cx + c * hl - s * hw, cy + s * hl + c * hw], -1),
            np.stack([cx + c * hl + s * hw, cy + s * hl - c * hw], -1),
            np.stack([cx - c * hl + s * hw, cy - s * hl - c * hw], -1),
            np.stack([cx - c * hl - s * hw, cy - s * hl + c * hw], -1),
        ],
        axis=-2,
    )


def _separated(ca, cb, ax, ay):
    pa = ca[..., 0] * ax[..., None] + ca[..., 1] * ay[..., None]
    pb = cb[..., 0] * ax[..., None] + cb[..., 1] * ay[..., None]
    return (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))


def boxes_overlap(a, boxes):
    """Separating-axis overlap test of box ``a`` against every row of ``boxes``."""
    m = boxes.shape[0]
    if m == 0:
        return np.zeros(0, dtype=bool)
    ca = np.broadcast_to(_corners(a), (m, 4, 2))
    cb = _corners(boxes)
    ones = np.ones(m)
    sep = _separated(ca, cb, a[2] * ones, a[3] * ones)
    sep |= _separated(ca, cb, -a[3] * ones, a[2] * ones)
    sep |= _separated(ca, cb, boxes[:, 2], boxes[:, 3])
    sep |= _separated(ca, cb, -boxes[:, 3], boxes[:, 2])
    return ~sep
