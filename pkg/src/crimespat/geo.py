"""Planar geometry primitives and a bulk-loaded R-tree.

All coordinates are assumed to be in one projected planar CRS.  Nothing here
reprojects or does spherical geodesy; GeoJSON coordinates are read as-is.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Any, Hashable, Iterable, Iterator, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError

FEET_PER_MILE = 5280.0

# on-boundary slack, relative to the polygon's bounding-box diagonal
_BOUNDARY_RTOL = 1e-12


@dataclass(frozen=True, slots=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point coordinates ({self.x}, {self.y})")

    def __iter__(self) -> Iterator[float]:
        yield self.x
        yield self.y

    def distance(self, other: "Point") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def _ring_signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def _as_ring(coords) -> np.ndarray:
    try:
        ring = np.array(coords, dtype=float)
    except (TypeError, ValueError) as exc:
        raise GeometryError(f"ring coordinates are not numeric: {exc}") from None
    if ring.ndim != 2 or ring.shape[1] < 2:
        raise GeometryError("ring must be a sequence of (x, y) pairs")
    ring = np.ascontiguousarray(ring[:, :2])
    if ring.shape[0] < 4:
        raise GeometryError(f"ring has {ring.shape[0]} vertices; at least 4 required")
    if not np.all(np.isfinite(ring)):
        raise GeometryError("ring has non-finite coordinates")
    if not np.array_equal(ring[0], ring[-1]):
        raise GeometryError("ring is not closed (first vertex != last vertex)")
    if _ring_signed_area(ring) == 0.0:
        raise GeometryError("ring has zero area")
    ring.setflags(write=False)
    return ring


class PolygonGeom:
    """Immutable (multi)polygon: a tuple of parts, each ``(exterior, *holes)``."""

    __slots__ = ("parts", "_segments", "_vertices", "_bounds", "_area")

    def __init__(self, parts: Sequence[Sequence[Any]]):
        if len(parts) == 0:
            raise GeometryError("polygon has no parts")
        built = []
        for part in parts:
            if len(part) == 0:
                raise GeometryError("polygon part has no exterior ring")
            built.append(tuple(_as_ring(r) for r in part))
        self.parts: tuple[tuple[np.ndarray, ...], ...] = tuple(built)

        rings = list(self.rings)
        segs = np.vstack([np.hstack([r[:-1], r[1:]]) for r in rings])
        segs.setflags(write=False)
        self._segments = segs
        verts = np.vstack([r[:-1] for r in rings])
        verts.setflags(write=False)
        self._vertices = verts
        self._bounds = (
            float(verts[:, 0].min()),
            float(verts[:, 1].min()),
            float(verts[:, 0].max()),
            float(verts[:, 1].max()),
        )
        area = 0.0
        for part in self.parts:
            area += abs(_ring_signed_area(part[0]))
            area -= sum(abs(_ring_signed_area(h)) for h in part[1:])
        if not area > 0.0:
            raise GeometryError("polygon has non-positive area (holes cover the exterior)")
        self._area = area

    @classmethod
    def from_rings(cls, exterior, holes=()) -> "PolygonGeom":
        return cls([[exterior, *holes]])

    @classmethod
    def box(cls, minx: float, miny: float, maxx: float, maxy: float) -> "PolygonGeom":
        return cls.from_rings(
            [(minx, miny), (maxx, miny), (maxx, maxy), (minx, maxy), (minx, miny)]
        )

    @classmethod
    def from_geojson(cls, geometry: dict) -> "PolygonGeom":
        if not isinstance(geometry, dict) or "type" not in geometry:
            raise GeometryError("GeoJSON geometry object expected")
        kind = geometry["type"]
        coords = geometry.get("coordinates")
        if kind == "Polygon":
            return cls([coords])
        if kind == "MultiPolygon":
            return cls(coords)
        raise GeometryError(f"unsupported geometry type {kind!r}; Polygon or MultiPolygon expected")

    def to_geojson(self) -> dict:
        def ring_list(r):
            return [[float(x), float(y)] for x, y in r]

        if len(self.parts) == 1:
            return {"type": "Polygon", "coordinates": [ring_list(r) for r in self.parts[0]]}
        return {
            "type": "MultiPolygon",
            "coordinates": [[ring_list(r) for r in part] for part in self.parts],
        }

    @property
    def rings(self) -> Iterator[np.ndarray]:
        for part in self.parts:
            yield from part

    @property
    def segments(self) -> np.ndarray:
        """Boundary segments as rows ``(x1, y1, x2, y2)``."""
        return self._segments

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self._bounds

    @property
    def area(self) -> float:
        return self._area

    def _boundary_eps(self) -> float:
        minx, miny, maxx, maxy = self._bounds
        return _BOUNDARY_RTOL * max(1.0, math.hypot(maxx - minx, maxy - miny))

    def translated(self, dx: float, dy: float) -> "PolygonGeom":
        return PolygonGeom([[r + (dx, dy) for r in part] for part in self.parts])

    def __repr__(self):
        return f"PolygonGeom(parts={len(self.parts)}, bounds={self._bounds})"


Geometry = Point | PolygonGeom


def _as_xy(points) -> np.ndarray:
    if isinstance(points, Point):
        return np.array([[points.x, points.y]])
    xy = np.asarray(points, dtype=float)
    if xy.ndim == 1:
        xy = xy.reshape(1, 2)
    return xy


def _segment_distances(xy: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """(m, k) Euclidean distances from m points to k segments."""
    px = xy[:, 0:1]
    py = xy[:, 1:2]
    x1, y1, x2, y2 = segs[:, 0], segs[:, 1], segs[:, 2], segs[:, 3]
    dx = x2 - x1
    dy = y2 - y1
    len2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = ((px - x1) * dx + (py - y1) * dy) / len2
    t = np.where(len2 > 0, np.clip(t, 0.0, 1.0), 0.0)
    return np.hypot(px - (x1 + t * dx), py - (y1 + t * dy))


def boundary_distances(points, g: PolygonGeom) -> np.ndarray:
    """Distance from each point to the nearest boundary segment of ``g``."""
    xy = _as_xy(points)
    out = np.empty(len(xy))
    # chunk to bound memory on large grids
    step = max(1, 2_000_000 // max(1, len(g.segments)))
    for s in range(0, len(xy), step):
        out[s : s + step] = _segment_distances(xy[s : s + step], g.segments).min(axis=1)
    return out


def _crossing_parity(xy: np.ndarray, segs: np.ndarray) -> np.ndarray:
    px = xy[:, 0:1]
    py = xy[:, 1:2]
    x1, y1, x2, y2 = segs[:, 0], segs[:, 1], segs[:, 2], segs[:, 3]
    straddles = (y1 > py) != (y2 > py)
    with np.errstate(invalid="ignore", divide="ignore"):
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
    hits = straddles & (px < xint)
    return (hits.sum(axis=1) % 2).astype(bool)


def points_in_polygon(points, g: PolygonGeom) -> np.ndarray:
    """Vectorised even-odd containment; boundary points count as inside."""
    xy = _as_xy(points)
    out = np.zeros(len(xy), dtype=bool)
    minx, miny, maxx, maxy = g.bounds
    eps = g._boundary_eps()
    cand = (
        (xy[:, 0] >= minx - eps)
        & (xy[:, 0] <= maxx + eps)
        & (xy[:, 1] >= miny - eps)
        & (xy[:, 1] <= maxy + eps)
    )
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        return out
    sub = xy[idx]
    step = max(1, 2_000_000 // max(1, len(g.segments)))
    for s in range(0, len(sub), step):
        chunk = sub[s : s + step]
        inside = _crossing_parity(chunk, g.segments)
        on_edge = _segment_distances(chunk, g.segments).min(axis=1) <= eps
        out[idx[s : s + step]] = inside | on_edge
    return out


def point_in_polygon(p: Point, g: PolygonGeom) -> bool:
    return bool(points_in_polygon(p, g)[0])


def points_to_polygon_distance(points, g: PolygonGeom) -> np.ndarray:
    xy = _as_xy(points)
    d = boundary_distances(xy, g)
    d[points_in_polygon(xy, g)] = 0.0
    return d


def point_to_polygon_distance(p: Point, g: PolygonGeom) -> float:
    """0 inside or on the boundary, else distance to the nearest edge."""
    return float(points_to_polygon_distance(p, g)[0])


def locate_points(points, geoms: Sequence[PolygonGeom]) -> np.ndarray:
    """Position of the first polygon in ``geoms`` containing each point, or -1.

    Boundary points count as inside, so a point on a shared edge goes to the
    earlier polygon.
    """
    xy = _as_xy(points)
    out = np.full(len(xy), -1, dtype=np.int64)
    order = np.argsort(xy[:, 0], kind="stable")
    sx = xy[order, 0]
    for k, g in enumerate(geoms):
        minx, _, maxx, _ = g.bounds
        eps = g._boundary_eps()
        lo = np.searchsorted(sx, minx - eps, side="left")
        hi = np.searchsorted(sx, maxx + eps, side="right")
        idx = order[lo:hi]
        idx = idx[out[idx] < 0]
        if idx.size:
            out[idx[points_in_polygon(xy[idx], g)]] = k
    return out


def _pair_distances(xy: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Row-wise distance from point i to segment i."""
    x1, y1, x2, y2 = segs.T
    dx, dy = x2 - x1, y2 - y1
    len2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = ((xy[:, 0] - x1) * dx + (xy[:, 1] - y1) * dy) / len2
    t = np.where(len2 > 0, np.clip(t, 0.0, 1.0), 0.0)
    return np.hypot(xy[:, 0] - (x1 + t * dx), xy[:, 1] - (y1 + t * dy))


def nearest_polygon_distances(points, geoms: Sequence[PolygonGeom], k: int = 16, max_samples: int = 200_000):
    """Exact distance from each point to the nearest polygon, and its position.

    Boundaries are sampled at spacing ``s`` into a k-d tree.  The nearest
    sample gives an upper bound ``u``; any segment closer than ``u`` has a
    sample within ``u + s/2``, so only those segments are measured exactly.
    Ties go to the lower position.
    """
    if not geoms:
        raise ValueError("no polygons to measure distance to")
    xy = _as_xy(points)
    n = len(xy)
    dist = np.zeros(n)
    which = locate_points(xy, geoms)
    todo = np.flatnonzero(which < 0)
    if todo.size == 0:
        return dist, which

    segs = np.concatenate([g.segments for g in geoms])
    owner = np.repeat(np.arange(len(geoms)), [len(g.segments) for g in geoms])
    seglen = np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
    spacing = max(float(seglen.sum()) / max_samples, float(seglen.max()) * 1e-9, 1e-300)
    per = np.maximum(1, np.ceil(seglen / spacing).astype(np.int64))
    seg_of = np.repeat(np.arange(len(segs)), per + 1)
    start = np.concatenate([[0], np.cumsum(per + 1)[:-1]])
    t = (np.arange(len(seg_of)) - np.repeat(start, per + 1)) / np.repeat(per, per + 1)
    samples = segs[seg_of, :2] + t[:, None] * (segs[seg_of, 2:] - segs[seg_of, :2])
    tree = cKDTree(samples)

    q = xy[todo]
    kk = min(k, len(samples))
    d, i = tree.query(q, k=kk)
    d, i = d.reshape(len(q), kk), i.reshape(len(q), kk)
    slack = 0.5 * spacing * (1 + 1e-9) + 1e-12 * (1.0 + np.abs(q).max(axis=1))
    reach = d[:, 0] + slack
    complete = (d[:, -1] > reach) | (kk == len(samples))

    rows = [np.repeat(np.flatnonzero(complete), kk)]
    cand = [seg_of[i[complete]].ravel()]
    rest = np.flatnonzero(~complete)
    if rest.size:
        balls = tree.query_ball_point(q[rest], reach[rest])
        rows.append(np.repeat(rest, [len(b) for b in balls]))
        cand.append(seg_of[np.concatenate([np.asarray(b, dtype=np.int64) for b in balls])])
    rows = np.concatenate(rows)
    cand = np.concatenate(cand)
    pd = _pair_distances(q[rows], segs[cand])
    own = owner[cand]
    order = np.lexsort((own, pd, rows))
    first = order[np.r_[True, rows[order][1:] != rows[order][:-1]]]
    dist[todo[rows[first]]] = pd[first]
    which[todo[rows[first]]] = own[first]
    return dist, which


def polygon_centroid(g: PolygonGeom) -> Point:
    """Area-weighted centroid; holes subtract, parts combine by area."""
    ax = ay = total = 0.0
    for part in g.parts:
        for k, ring in enumerate(part):
            x, y = ring[:, 0], ring[:, 1]
            # shift for numerical stability with large projected coordinates
            x0, y0 = x[0], y[0]
            xs, ys = x - x0, y - y0
            cross = xs[:-1] * ys[1:] - xs[1:] * ys[:-1]
            a = 0.5 * cross.sum()
            if a == 0.0:
                raise GeometryError("zero-area ring in centroid computation")
            cx = ((xs[:-1] + xs[1:]) * cross).sum() / (6.0 * a) + x0
            cy = ((ys[:-1] + ys[1:]) * cross).sum() / (6.0 * a) + y0
            w = abs(a) if k == 0 else -abs(a)
            ax += w * cx
            ay += w * cy
            total += w
    if total <= 0.0:
        raise GeometryError("polygon has zero area")
    return Point(ax / total, ay / total)


def _segments_intersect(s1: np.ndarray, s2: np.ndarray) -> bool:
    """True if any segment of ``s1`` intersects any segment of ``s2``."""
    a = s1[:, None, 0:2]
    b = s1[:, None, 2:4]
    c = s2[None, :, 0:2]
    d = s2[None, :, 2:4]

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (
            r[..., 0] - p[..., 0]
        )

    o1 = orient(a, b, c)
    o2 = orient(a, b, d)
    o3 = orient(c, d, a)
    o4 = orient(c, d, b)
    proper = (np.sign(o1) * np.sign(o2) < 0) & (np.sign(o3) * np.sign(o4) < 0)
    return bool(proper.any())


def polygon_gap(a: PolygonGeom, b: PolygonGeom) -> float:
    """Minimum boundary-to-boundary distance; 0 when the polygons meet or overlap."""
    d = min(
        float(boundary_distances(a.vertices, b).min()),
        float(boundary_distances(b.vertices, a).min()),
    )
    if d == 0.0:
        return 0.0
    if points_in_polygon(a.vertices, b).any() or points_in_polygon(b.vertices, a).any():
        return 0.0
    if _bboxes_overlap(a.bounds, b.bounds, 0.0) and _segments_intersect(a.segments, b.segments):
        return 0.0
    return d


def _bboxes_overlap(b1, b2, tol: float) -> bool:
    return not (
        b1[2] + tol < b2[0] or b2[2] + tol < b1[0] or b1[3] + tol < b2[1] or b2[3] + tol < b1[1]
    )


def polygons_touch(a: PolygonGeom, b: PolygonGeom, tol: float = 1e-6) -> bool:
    """Queen-style contact: a vertex of one within ``tol`` of the other's boundary.

    Overlapping polygons (crossing edges or containment) also count.
    """
    if not _bboxes_overlap(a.bounds, b.bounds, tol):
        return False
    if boundary_distances(a.vertices, b).min() <= tol:
        return True
    if boundary_distances(b.vertices, a).min() <= tol:
        return True
    if points_in_polygon(a.vertices, b).any() or points_in_polygon(b.vertices, a).any():
        return True
    return _segments_intersect(a.segments, b.segments)


def geometry_bounds(g: Geometry) -> tuple[float, float, float, float]:
    if isinstance(g, Point):
        return (g.x, g.y, g.x, g.y)
    return g.bounds


def distance_to(p: Point, g: Geometry) -> float:
    if isinstance(g, Point):
        return p.distance(g)
    return point_to_polygon_distance(p, g)


def _box_mindist(box, x: float, y: float) -> float:
    dx = max(box[0] - x, 0.0, x - box[2])
    dy = max(box[1] - y, 0.0, y - box[3])
    return math.hypot(dx, dy)


class SpatialIndex:
    """Sort-Tile-Recursive packed R-tree over geometry bounding boxes.

    Leaves hold item positions; nearest-neighbour search is best-first over
    node boxes with exact geometry distances at the leaves.
    """

    def __init__(self, items: Iterable[tuple[Hashable, Geometry]], node_capacity: int = 16):
        items = list(items)
        self.ids = [i for i, _ in items]
        self.geoms = [g for _, g in items]
        self.node_capacity = max(2, int(node_capacity))
        self._boxes = [geometry_bounds(g) for g in self.geoms]
        # node: (bbox, is_leaf, children)
        self._nodes: list[tuple[tuple[float, float, float, float], bool, list[int]]] = []
        self._root = self._build() if items else None

    def __len__(self):
        return len(self.ids)

    def _pack(self, entries: list[int], boxes, leaf: bool) -> list[int]:
        cap = self.node_capacity
        n = len(entries)
        n_nodes = math.ceil(n / cap)
        n_slices = max(1, math.ceil(math.sqrt(n_nodes)))
        per_slice = n_slices * cap

        def cx(e):
            b = boxes[e]
            return (b[0] + b[2]) / 2

        def cy(e):
            b = boxes[e]
            return (b[1] + b[3]) / 2

        ordered = sorted(entries, key=lambda e: (cx(e), cy(e), e))
        made = []
        for s in range(0, n, per_slice):
            strip = sorted(ordered[s : s + per_slice], key=lambda e: (cy(e), cx(e), e))
            for c in range(0, len(strip), cap):
                children = strip[c : c + cap]
                cb = [boxes[e] for e in children]
                bbox = (
                    min(b[0] for b in cb),
                    min(b[1] for b in cb),
                    max(b[2] for b in cb),
                    max(b[3] for b in cb),
                )
                self._nodes.append((bbox, leaf, children))
                made.append(len(self._nodes) - 1)
        return made

    def _build(self) -> int:
        level = self._pack(list(range(len(self.ids))), self._boxes, leaf=True)
        while len(level) > 1:
            node_boxes = {k: self._nodes[k][0] for k in level}
            level = self._pack(level, node_boxes, leaf=False)
        return level[0]

    def nearest(self, p: Point) -> tuple[Hashable, float]:
        """Globally nearest item; exact ties go to the smallest id."""
        if self._root is None:
            raise ValueError("nearest() on an empty spatial index")
        heap: list[tuple[float, int, int]] = [
            (_box_mindist(self._nodes[self._root][0], p.x, p.y), 0, self._root)
        ]
        best = math.inf
        winners: list[Hashable] = []
        while heap and heap[0][0] <= best:
            d, kind, k = heapq.heappop(heap)
            if kind == 1:
                if d < best:
                    best, winners = d, [self.ids[k]]
                elif d == best:
                    winners.append(self.ids[k])
                continue
            _, leaf, children = self._nodes[k]
            for c in children:
                if leaf:
                    heapq.heappush(heap, (distance_to(p, self.geoms[c]), 1, c))
                else:
                    heapq.heappush(heap, (_box_mindist(self._nodes[c][0], p.x, p.y), 0, c))
        return min(winners), best

    def within_radius(self, p: Point, r: float) -> list[Hashable]:
        """Ids of all items at distance <= r, sorted."""
        if self._root is None:
            return []
        found = []
        stack = [self._root]
        while stack:
            bbox, leaf, children = self._nodes[stack.pop()]
            if _box_mindist(bbox, p.x, p.y) > r:
                continue
            for c in children:
                if leaf:
                    if _box_mindist(self._boxes[c], p.x, p.y) <= r and distance_to(
                        p, self.geoms[c]
                    ) <= r:
                        found.append(self.ids[c])
                else:
                    stack.append(c)
        return sorted(found)

    def query_bbox(self, bbox: tuple[float, float, float, float]) -> list[int]:
        """Positions (not ids) of items whose boxes intersect ``bbox``."""
        if self._root is None:
            return []
        found = []
        stack = [self._root]
        while stack:
            nb, leaf, children = self._nodes[stack.pop()]
            if not _bboxes_overlap(nb, bbox, 0.0):
                continue
            if leaf:
                found.extend(c for c in children if _bboxes_overlap(self._boxes[c], bbox, 0.0))
            else:
                stack.extend(children)
        return sorted(found)


def build_index(items: Iterable[tuple[Hashable, Geometry]], node_capacity: int = 16) -> SpatialIndex:
    return SpatialIndex(items, node_capacity=node_capacity)


def nearest(index: SpatialIndex, p: Point) -> tuple[Hashable, float]:
    return index.nearest(p)


def within_radius(index: SpatialIndex, p: Point, r: float) -> list[Hashable]:
    return index.within_radius(p, r)
