"""Large multiunit parcel selection and parcel-proximity measures."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import DataError, SchemaError
from .geo import (
    FEET_PER_MILE,
    Point,
    PolygonGeom,
    build_index,
    nearest_polygon_distances,
    points_in_polygon,
    points_to_polygon_distance,
    polygon_centroid,
    polygon_gap,
)
from .ingest import CRIME_TYPES, CrimeRecord, CrimeType, Window

log = logging.getLogger(__name__)

MULTIUNIT_CODES = frozenset({8830, 8899})


@dataclass(frozen=True)
class Parcel:
    id: Hashable
    geometry: PolygonGeom
    landuse_code: int
    units: int

    def __post_init__(self):
        if self.units < 0 or int(self.units) != self.units:
            raise DataError(f"parcel {self.id}: units must be a non-negative integer")

    @property
    def rep_point(self) -> Point:
        return polygon_centroid(self.geometry)


@dataclass(frozen=True)
class ParcelCluster:
    members: tuple[Hashable, ...]
    total_units: int
    qualifies: bool


@dataclass
class Selection:
    selected: list[Parcel]
    clusters: list[ParcelCluster]

    @property
    def ids(self) -> list[Hashable]:
        return [p.id for p in self.selected]

    def cluster_of(self) -> dict[Hashable, int]:
        """Parcel id -> index of its multi-member cluster."""
        return {m: k for k, c in enumerate(self.clusters) for m in c.members}


class UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))
        self.rank = [0] * size

    def find(self, u: int) -> int:
        root = u
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[u] != root:
            self.parent[u], u = root, self.parent[u]
        return root

    def union(self, u: int, v: int) -> None:
        ru, rv = self.find(u), self.find(v)
        if ru == rv:
            return
        if self.rank[ru] < self.rank[rv]:
            ru, rv = rv, ru
        self.parent[rv] = ru
        if self.rank[ru] == self.rank[rv]:
            self.rank[ru] += 1

    def groups(self) -> list[list[int]]:
        out = defaultdict(list)
        for i in range(len(self.parent)):
            out[self.find(i)].append(i)
        return sorted(out.values(), key=lambda g: g[0])


def select_multiunit(
    parcels: Sequence[Parcel],
    codes: Iterable[int] = MULTIUNIT_CODES,
    unit_threshold: int = 24,
    cluster_min_units: int = 10,
    cluster_gap_ft: float = 30.0,
    feet_per_unit: float = 1.0,
) -> Selection:
    """Parcels meeting the unit threshold, plus members of qualifying clusters.

    Cluster candidates are coded parcels with more than ``cluster_min_units``
    units, chained when boundary gaps are strictly below ``cluster_gap_ft``.
    A cluster qualifies with at least two members and ``unit_threshold``
    combined units.
    """
    codes = frozenset(int(c) for c in codes)
    ordered = sorted(parcels, key=lambda p: p.id)
    coded = [p for p in ordered if p.landuse_code in codes]
    chosen = {p.id for p in coded if p.units >= unit_threshold}

    cands = [p for p in coded if p.units > cluster_min_units]
    gap = cluster_gap_ft / feet_per_unit
    index = build_index((p.id, p.geometry) for p in cands)
    uf = UnionFind(len(cands))
    for i, p in enumerate(cands):
        minx, miny, maxx, maxy = p.geometry.bounds
        for j in index.query_bbox((minx - gap, miny - gap, maxx + gap, maxy + gap)):
            if j > i and polygon_gap(p.geometry, cands[j].geometry) < gap:
                uf.union(i, j)

    clusters = []
    for group in uf.groups():
        if len(group) < 2:
            continue
        members = tuple(cands[k].id for k in group)
        total = sum(cands[k].units for k in group)
        qualifies = total >= unit_threshold
        clusters.append(ParcelCluster(members, int(total), qualifies))
        if qualifies:
            chosen.update(members)
    return Selection(selected=[p for p in ordered if p.id in chosen], clusters=clusters)


def _radius_units(radius_miles: float, feet_per_unit: float) -> float:
    return radius_miles * FEET_PER_MILE / feet_per_unit


def qmi_parc(
    centroids: Sequence[Point],
    selected: Sequence[Parcel],
    radius_miles: float = 0.25,
    feet_per_unit: float = 1.0,
) -> np.ndarray:
    """Selected parcels whose centroid lies within ``radius_miles`` of each centroid."""
    r = _radius_units(radius_miles, feet_per_unit)
    index = build_index((k, p.rep_point) for k, p in enumerate(selected))
    return np.array([len(index.within_radius(c, r)) for c in centroids], dtype=np.int64)


@dataclass
class DistanceSummary:
    crime_type: CrimeType
    window: Window
    n: int
    n_within: int
    share_within: float
    median_miles: float


@dataclass
class CrimeDistances:
    distances_miles: np.ndarray
    summaries: list[DistanceSummary]


def nearest_parcel_distances(points: Sequence[Point], selected: Sequence[Parcel]) -> np.ndarray:
    if not selected:
        raise ValueError("no selected parcels to measure distance to")
    xy = np.array([(p.x, p.y) for p in points], dtype=float).reshape(-1, 2)
    return nearest_polygon_distances(xy, [p.geometry for p in selected])[0]


def crime_parcel_distances(
    crimes: Sequence[CrimeRecord],
    night_flags: Sequence[bool],
    selected: Sequence[Parcel],
    radius_miles: float = 0.25,
    feet_per_unit: float = 1.0,
) -> CrimeDistances:
    """Nearest-parcel distance per crime plus per type x window summaries (miles)."""
    d = nearest_parcel_distances([c.location for c in crimes], selected)
    miles = d * feet_per_unit / FEET_PER_MILE
    types = np.array([c.crime_type.value for c in crimes])
    night = np.asarray(night_flags, dtype=bool)
    summaries = []
    for t in CRIME_TYPES:
        is_t = types == t.value
        for w in (Window.ALL, Window.DAY, Window.NIGHT):
            mask = is_t if w is Window.ALL else is_t & (night if w is Window.NIGHT else ~night)
            m = miles[mask]
            within = int((m <= radius_miles).sum())
            summaries.append(
                DistanceSummary(
                    crime_type=t,
                    window=w,
                    n=int(m.size),
                    n_within=within,
                    share_within=within / m.size if m.size else math.nan,
                    median_miles=float(np.median(m)) if m.size else math.nan,
                )
            )
    return CrimeDistances(miles, summaries)


def coverage_fraction(
    boundary: PolygonGeom,
    selected: Sequence[Parcel],
    radius_miles: float = 0.25,
    grid_step_ft: float = 100.0,
    feet_per_unit: float = 1.0,
) -> float:
    """Share of regular grid samples inside ``boundary`` within reach of a selected parcel.

    Samples sit at cell centres of a ``grid_step_ft`` lattice anchored at the
    boundary's lower-left corner.
    """
    step = grid_step_ft / feet_per_unit
    minx, miny, maxx, maxy = boundary.bounds
    xs = np.arange(minx + step / 2, maxx, step)
    ys = np.arange(miny + step / 2, maxy, step)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts[points_in_polygon(pts, boundary)]
    if len(pts) == 0 or not selected:
        return 0.0
    r = _radius_units(radius_miles, feet_per_unit)
    covered = np.zeros(len(pts), dtype=bool)
    order = np.argsort(pts[:, 0], kind="stable")
    sx = pts[order, 0]
    for p in selected:
        bx0, by0, bx1, by1 = p.geometry.bounds
        lo, hi = np.searchsorted(sx, [bx0 - r, bx1 + r], side="left")
        idx = order[lo:hi]
        idx = idx[~covered[idx]]
        sub = pts[idx]
        near = (sub[:, 1] >= by0 - r) & (sub[:, 1] <= by1 + r)
        idx, sub = idx[near], sub[near]
        if idx.size:
            covered[idx[points_to_polygon_distance(sub, p.geometry) <= r]] = True
    return float(covered.mean())


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self):
        return [(float(a), float(b), int(c)) for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def _binned(values: np.ndarray, width: float) -> Histogram:
    if values.size == 0:
        return Histogram(np.zeros(0), np.zeros(0, dtype=np.int64))
    idx = np.floor(values / width).astype(np.int64)
    top = int(idx.max())
    counts = np.bincount(idx, minlength=top + 1)
    return Histogram(np.arange(top + 2) * width, counts.astype(np.int64))


def parcel_histograms(
    selected: Sequence[Parcel],
    cbd: Point,
    feet_per_unit: float = 1.0,
    distance_bin_miles: float = 0.5,
    unit_bin_width: float = 10.0,
) -> tuple[Histogram, Histogram]:
    """Distance-from-CBD histogram (0.5-mile bins) and unit-count histogram."""
    dist = np.array([p.rep_point.distance(cbd) * feet_per_unit / FEET_PER_MILE for p in selected])
    units = np.array([p.units for p in selected], dtype=float)
    return _binned(dist, distance_bin_miles), _binned(units, unit_bin_width)


PARCEL_FIELDS = ("id", "landuse_code", "units")


def load_parcels(collection: dict | TextIO, fields: Mapping[str, str] | None = None) -> list[Parcel]:
    """Parcels from a GeoJSON FeatureCollection."""
    if not isinstance(collection, dict):
        collection = json.load(collection)
    fmap = {k: k for k in PARCEL_FIELDS}
    fmap.update(fields or {})
    if collection.get("type") != "FeatureCollection":
        raise SchemaError("parcels: GeoJSON FeatureCollection expected")
    out = []
    for n, feat in enumerate(collection.get("features", [])):
        props = feat.get("properties") or {}
        pid = props.get(fmap["id"], feat.get("id"))
        if pid is None:
            raise SchemaError(f"parcel feature {n} has no id")
        try:
            code = int(props[fmap["landuse_code"]])
            units = int(props[fmap["units"]] or 0)
        except KeyError as exc:
            raise SchemaError(f"parcel {pid}: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise DataError(f"parcel {pid}: bad attribute: {exc}") from None
        out.append(Parcel(str(pid), PolygonGeom.from_geojson(feat.get("geometry")), code, units))
    return out


def load_parcels_csv(stream: TextIO, fields: Mapping[str, str] | None = None) -> list[Parcel]:
    """Parcels from CSV with a GeoJSON ``geometry`` column."""
    fmap = {k: k for k in (*PARCEL_FIELDS, "geometry")}
    fmap.update(fields or {})
    reader = csv.DictReader(stream)
    missing = [fmap[k] for k in fmap if fmap[k] not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"parcel CSV: missing column(s) {missing}")
    out = []
    for row in reader:
        try:
            geom = PolygonGeom.from_geojson(json.loads(row[fmap["geometry"]]))
            out.append(
                Parcel(str(row[fmap["id"]]), geom, int(row[fmap["landuse_code"]]), int(row[fmap["units"]] or 0))
            )
        except (ValueError, TypeError) as exc:
            raise DataError(f"parcel CSV line {reader.line_num}: {exc}") from None
    return out
