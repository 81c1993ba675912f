"""Geometry kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``LATENTDRIVE_PURE_PYTHON=1``
to force the numpy implementation. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("LATENTDRIVE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

__all__ = [
    "BACKEND",
    "boxes_overlap",
    "points_in_boxes",
    "points_near_segments",
    "raycast_boxes",
]


def points_in_boxes(points, boxes, impl=None):
    """Index of the last box containing each point, ``-1`` where none does."""
    impl = impl or _impl
    return impl.points_in_boxes(
        np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6),
    )


def points_near_segments(points, segs, half_width, impl=None):
    """True where a point lies within ``half_width`` of any segment."""
    impl = impl or _impl
    return impl.points_near_segments(
        np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(segs, dtype=np.float64).reshape(-1, 4),
        float(half_width),
    )


def raycast_boxes(origin, dirs, boxes, max_range, impl=None):
    """Distance along each unit direction to the first box hit (``inf`` beyond range)."""
    impl = impl or _impl
    return impl.raycast_boxes(
        float(origin[0]),
        float(origin[1]),
        np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6),
        float(max_range),
    )


def boxes_overlap(box, boxes, impl=None):
    """Per-row overlap flags of ``box`` against ``boxes`` (closed boxes, touching counts)."""
    impl = impl or _impl
    return impl.boxes_overlap(
        np.ascontiguousarray(box, dtype=np.float64).reshape(6),
        np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6),
    )
