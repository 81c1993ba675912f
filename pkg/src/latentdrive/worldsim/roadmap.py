"""Grid road networks and route planning over directed lane segments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import ConfigurationError, ContractError

MIN_MAP_SIZE = 100.0


@dataclass(frozen=True)
class Junction:
    id: int
    position: tuple
    segments: tuple


@dataclass
class MapSpec:
    """Road network: directed lane centerlines plus rendering geometry.

    ``drivable_region`` is a union of oriented boxes (kernel box rows) and
    ``markings`` holds lane-marking line segments ``(x0, y0, x1, y1)``.
    ``segment_nodes[i]`` is the ``(start, end)`` junction id of segment ``i``
    (``None`` for open ends).
    """

    lane_segments: list
    lane_width: float
    intersections: list
    drivable_region: np.ndarray
    route_graph: dict
    markings: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    segment_nodes: list = field(default_factory=list)
    size_m: float = 0.0

    def junction_position(self, node):
        return np.asarray(self.intersections[node].position, dtype=np.float64)

    def segment_length(self, seg):
        p = self.lane_segments[seg]
        return float(np.sum(np.hypot(*np.diff(p, axis=0).T)))

    def transformed(self, tf) -> "MapSpec":
        return MapSpec(
            lane_segments=[tf.points(p) for p in self.lane_segments],
            lane_width=self.lane_width,
            intersections=[
                Junction(j.id, tuple(tf.points(j.position)), j.segments)
                for j in self.intersections
            ],
            drivable_region=tf.boxes(self.drivable_region),
            route_graph=self.route_graph,
            markings=tf.segments(self.markings),
            segment_nodes=self.segment_nodes,
            size_m=self.size_m,
        )

    def check_invariants(self):
        """Raise ``ContractError`` if a structural invariant is violated."""
        for j in self.intersections:
            if len(j.segments) < 2:
                raise ContractError(f"junction {j.id} references <2 segments")
        half = 0.5 * self.lane_width
        for i, pts in enumerate(self.lane_segments):
            samples = _densify(pts, 1.0)
            d = np.diff(pts, axis=0)
            # lateral normals of the first edge are enough for straight lanes
            tangent = d[0] / np.hypot(*d[0])
            normal = np.array([-tangent[1], tangent[0]])
            for off in (-half * 0.999, 0.0, half * 0.999):
                inside = kernels.points_in_boxes(samples + off * normal, self.drivable_region)
                if np.any(inside < 0):
                    raise ContractError(f"segment {i} leaves the drivable region")
        if not _strongly_connected(self.route_graph, len(self.lane_segments)):
            raise ContractError("route graph is not connected")


def _strongly_connected(graph, n):
    if n == 0:
        return True

    def reach(adj):
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == n

    rev = {}
    for u, vs in graph.items():
        for v in vs:
            rev.setdefault(v, []).append(u)
    return reach(graph) and reach(rev)


def _densify(points, step):
    out = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(np.ceil(np.hypot(*(b - a)) / step)))
        t = np.linspace(0.0, 1.0, n + 1)[1:, None]
        out.append(a + t * (b - a))
    return np.concatenate(out, axis=0)


def _grid_lines(rng, size, min_spacing):
    k_max = int(np.floor(size / min_spacing)) - 1
    k = int(rng.integers(1, k_max + 1))
    slack = size - (k + 1) * min_spacing
    gaps = min_spacing + slack * rng.dirichlet(np.ones(k + 1))
    lines = np.concatenate([[0.0], np.cumsum(gaps)])
    lines[-1] = size
    return lines


def generate_map(seed: int, size_m: float = 200.0, lane_width: float = 3.5,
                 min_spacing: float = 40.0) -> MapSpec:
    """Grid town of two-lane roads; the outer roads form a ring.

    Interior road positions are drawn from ``seed``; the same seed always
    yields the same map.
    """
    if size_m < MIN_MAP_SIZE or size_m < 2 * min_spacing:
        raise ConfigurationError(
            f"map size {size_m} m is too small to fit one intersection "
            f"(need >= {max(MIN_MAP_SIZE, 2 * min_spacing)} m)",
            key="map_size",
        )
    rng = np.random.default_rng(seed)
    xs = _grid_lines(rng, size_m, min_spacing)
    ys = _grid_lines(rng, size_m, min_spacing)
    nx, ny = len(xs), len(ys)
    w = lane_width
    half = 0.5 * w

    def node(i, j):
        return j * nx + i

    segments, seg_nodes = [], []

    def add(p0, p1, a, b):
        segments.append(np.array([p0, p1], dtype=np.float64))
        seg_nodes.append((a, b))

    for j, y in enumerate(ys):
        for i in range(nx - 1):
            add((xs[i], y - half), (xs[i + 1], y - half), node(i, j), node(i + 1, j))
            add((xs[i + 1], y + half), (xs[i], y + half), node(i + 1, j), node(i, j))
    for i, x in enumerate(xs):
        for j in range(ny - 1):
            add((x + half, ys[j]), (x + half, ys[j + 1]), node(i, j), node(i, j + 1))
            add((x - half, ys[j + 1]), (x - half, ys[j]), node(i, j + 1), node(i, j))

    touching = {}
    for s, (a, b) in enumerate(seg_nodes):
        touching.setdefault(a, []).append(s)
        touching.setdefault(b, []).append(s)
    intersections = [
        Junction(node(i, j), (float(xs[i]), float(ys[j])), tuple(touching[node(i, j)]))
        for j in range(ny)
        for i in range(nx)
    ]

    outgoing = {}
    for s, (a, _) in enumerate(seg_nodes):
        outgoing.setdefault(a, []).append(s)
    route_graph = {
        s: tuple(t for t in outgoing.get(b, ()) if seg_nodes[t][1] != a)
        for s, (a, b) in enumerate(seg_nodes)
    }

    boxes, marks = [], []
    for j, y in enumerate(ys):
        for i in range(nx - 1):
            cx = 0.5 * (xs[i] + xs[i + 1])
            hl = 0.5 * (xs[i + 1] - xs[i]) + w
            boxes.append((cx, y, 1.0, 0.0, hl, w))
            marks.append((xs[i] + w, y, xs[i + 1] - w, y))
    for i, x in enumerate(xs):
        for j in range(ny - 1):
            cy = 0.5 * (ys[j] + ys[j + 1])
            hl = 0.5 * (ys[j + 1] - ys[j]) + w
            boxes.append((x, cy, 0.0, 1.0, hl, w))
            marks.append((x, ys[j] + w, x, ys[j + 1] - w))
    for jn in intersections:
        boxes.append((jn.position[0], jn.position[1], 1.0, 0.0, w, w))

    return MapSpec(
        lane_segments=segments,
        lane_width=lane_width,
        intersections=intersections,
        drivable_region=np.array(boxes, dtype=np.float64),
        route_graph=route_graph,
        markings=np.array(marks, dtype=np.float64),
        segment_nodes=seg_nodes,
        size_m=float(size_m),
    )


class Route:
    """Waypoint polyline with arc-length bookkeeping.

    Turns between consecutive segments are rounded with circular fillets of
    ``turn_radius``. ``junctions`` lists ``(node, s_in, s_out)`` spans where
    the polyline runs within ``zone_radius`` of a junction centre.
    """

    def __init__(self, segments, points, junctions=(), truncated=False,
                 turn_radius=5.0, zone_radius=10.0):
        self.segments = list(segments)
        self.points = np.asarray(points, dtype=np.float64)
        edge = np.hypot(*np.diff(self.points, axis=0).T)
        self.cum = np.concatenate([[0.0], np.cumsum(edge)])
        self.junctions = list(junctions)
        self.truncated = truncated
        self.turn_radius = turn_radius
        self.zone_radius = zone_radius

    @property
    def length(self):
        return float(self.cum[-1])

    def pose_at(self, s):
        """``(x, y, heading)`` at arc length ``s`` (clamped to the polyline)."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        i = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.points) - 2)
        a = self.points[i]
        b = self.points[i + 1]
        seg = self.cum[i + 1] - self.cum[i]
        t = np.where(seg > 0, (s - self.cum[i]) / np.where(seg > 0, seg, 1.0), 0.0)
        p = a + t[..., None] * (b - a)
        h = np.arctan2(b[..., 1] - a[..., 1], b[..., 0] - a[..., 0])
        return p[..., 0], p[..., 1], h

    def project(self, points, s_lo=None, s_hi=None):
        """Nearest arc length and distance of each point to the polyline window."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        lo = 0 if s_lo is None else max(0, int(np.searchsorted(self.cum, s_lo, side="right")) - 1)
        hi = len(self.points) - 1 if s_hi is None else int(np.searchsorted(self.cum, s_hi, side="left"))
        hi = min(max(hi, lo + 1), len(self.points) - 1)
        a = self.points[lo:hi]
        b = self.points[lo + 1:hi + 1]
        e = b - a
        len2 = np.sum(e * e, axis=1)
        safe = np.where(len2 > 0, len2, 1.0)
        rel = points[:, None, :] - a[None, :, :]
        t = np.clip(np.sum(rel * e[None], axis=2) / safe, 0.0, 1.0)
        q = a[None] + t[..., None] * e[None] - points[:, None, :]
        d = np.hypot(q[..., 0], q[..., 1])
        k = np.argmin(d, axis=1)
        rows = np.arange(points.shape[0])
        s = self.cum[lo + k] + t[rows, k] * np.sqrt(len2[k])
        return s, d[rows, k]

    def window_segments(self, s_lo, s_hi):
        """Polyline edges overlapping ``[s_lo, s_hi]`` as ``(x0, y0, x1, y1)`` rows."""
        lo = max(0, int(np.searchsorted(self.cum, s_lo, side="right")) - 1)
        hi = min(len(self.points) - 1, int(np.searchsorted(self.cum, s_hi, side="left")))
        if hi <= lo:
            hi = min(lo + 1, len(self.points) - 1)
        return np.concatenate([self.points[lo:hi], self.points[lo + 1:hi + 1]], axis=1)

    def extended(self, map_spec: MapSpec, rng) -> "Route":
        """Append one randomly chosen successor segment; flags ``truncated`` at dead ends."""
        last = self.segments[-1]
        nexts = map_spec.route_graph.get(last, ())
        if not nexts:
            return Route(self.segments, self.points, self.junctions, True,
                         self.turn_radius, self.zone_radius)
        nxt = nexts[int(rng.integers(len(nexts)))]
        return self._append(map_spec, nxt)

    def _append(self, map_spec, nxt):
        q = map_spec.lane_segments[nxt]
        p = self.points
        d_a = p[-1] - p[-2]
        d_a = d_a / np.hypot(*d_a)
        d_b = q[1] - q[0]
        d_b = d_b / np.hypot(*d_b)
        cross = d_a[0] * d_b[1] - d_a[1] * d_b[0]
        dot = float(d_a @ d_b)
        if abs(cross) < 1e-9:
            if np.hypot(*(q[0] - p[-1])) < 1e-9:
                pts = np.concatenate([p, q[1:]])
            else:
                pts = np.concatenate([p, q])
        else:
            # corner where the two lane lines meet
            m = np.array([d_a, -d_b]).T
            t = np.linalg.solve(m, q[0] - p[-1])[0]
            corner = p[-1] + t * d_a
            theta = np.arctan2(cross, dot)
            r = self.turn_radius
            lt = r * np.tan(0.5 * abs(theta))
            t1 = corner - lt * d_a
            side = np.array([-d_a[1], d_a[0]]) * np.sign(cross)
            center = t1 + r * side
            phi0 = np.arctan2(t1[1] - center[1], t1[0] - center[0])
            n_arc = max(2, int(np.ceil(abs(theta) / (np.pi / 18))))
            phis = phi0 + np.linspace(0.0, theta, n_arc + 1)
            arc = center + r * np.stack([np.cos(phis), np.sin(phis)], axis=1)
            pts = np.concatenate([p[:-1], arc, q[1:]])
        route = Route(self.segments + [nxt], pts, self.junctions, False,
                      self.turn_radius, self.zone_radius)
        nodes = map_spec.segment_nodes
        if nodes and nodes[nxt][0] is not None:
            span = route._zone_span(map_spec.junction_position(nodes[nxt][0]), self.length)
            if span is not None:
                route.junctions = self.junctions + [(nodes[nxt][0],) + span]
        return route

    def _zone_span(self, centre, s_guess):
        r = self.zone_radius
        lo = max(0.0, s_guess - 3 * r)
        hi = min(self.length, s_guess + 3 * r)
        s = np.arange(lo, hi, 0.1)
        x, y, _ = self.pose_at(s)
        inside = np.hypot(x - centre[0], y - centre[1]) < r
        if not inside.any():
            return None
        idx = np.flatnonzero(inside)
        return (float(s[idx[0]]), float(s[idx[-1]]))

    def trimmed(self, s_keep):
        """Drop vertices wholly behind ``s_keep``; returns ``(route, shift)``."""
        i = int(np.searchsorted(self.cum, s_keep, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        if i == 0:
            return self, 0.0
        shift = float(self.cum[i])
        juncs = [(n, a - shift, b - shift) for n, a, b in self.junctions if b - shift > -50.0]
        return (
            Route(self.segments[-2:], self.points[i:], juncs, self.truncated,
                  self.turn_radius, self.zone_radius),
            shift,
        )


def plan_route(map_spec: MapSpec, start: int, rng, min_length: float = 600.0,
               turn_radius: float = 5.0, zone_radius: float = 10.0) -> Route:
    """Random route from the start of segment ``start`` following the route graph.

    Returns the longest prefix reachable when a dead end cuts it short, with
    ``truncated`` set.
    """
    if start not in map_spec.route_graph or not 0 <= start < len(map_spec.lane_segments):
        raise ContractError(f"segment {start} is not in the route graph")
    route = Route([start], map_spec.lane_segments[start], (), False, turn_radius, zone_radius)
    while route.length < min_length:
        route = route.extended(map_spec, rng)
        if route.truncated:
            break
    return route
