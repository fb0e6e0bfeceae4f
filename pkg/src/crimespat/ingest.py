"""Input parsing, day/night classification, and block-group rates."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import DataError, SchemaError
from .geo import FEET_PER_MILE, Point, PolygonGeom, locate_points, polygon_centroid

log = logging.getLogger(__name__)


class CrimeType(str, Enum):
    BURGLARY = "Burglary"
    ROBBERY = "Robbery"
    THEFT_OF_MV = "TheftOfMV"
    THEFT_FROM_MV = "TheftFromMV"

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, text: str) -> "CrimeType":
        key = re.sub(r"[^a-z]", "", text.lower())
        try:
            return _ALIASES[key]
        except KeyError:
            raise ValueError(f"unsupported crime type {text!r}") from None


_SHORT = {
    CrimeType.BURGLARY: "BURG",
    CrimeType.ROBBERY: "ROB",
    CrimeType.THEFT_OF_MV: "TMV",
    CrimeType.THEFT_FROM_MV: "TFMV",
}

_ALIASES = {
    "burglary": CrimeType.BURGLARY,
    "burglaries": CrimeType.BURGLARY,
    "burg": CrimeType.BURGLARY,
    "robbery": CrimeType.ROBBERY,
    "robberies": CrimeType.ROBBERY,
    "rob": CrimeType.ROBBERY,
    "theftofmv": CrimeType.THEFT_OF_MV,
    "theftofmotorvehicle": CrimeType.THEFT_OF_MV,
    "tmv": CrimeType.THEFT_OF_MV,
    "mvtheft": CrimeType.THEFT_OF_MV,
    "theftfrommv": CrimeType.THEFT_FROM_MV,
    "theftfrommotorvehicle": CrimeType.THEFT_FROM_MV,
    "tfmv": CrimeType.THEFT_FROM_MV,
}

CRIME_TYPES: tuple[CrimeType, ...] = tuple(CrimeType)


class DayNight(str, Enum):
    DAY = "Day"
    NIGHT = "Night"


class Window(str, Enum):
    ALL = "All"
    DAY = "Day"
    NIGHT = "Night"


WINDOWS: tuple[Window, ...] = tuple(Window)


@dataclass(frozen=True)
class CrimeRecord:
    crime_type: CrimeType
    timestamp: dt.datetime
    location: Point


@dataclass(frozen=True)
class TimeWindow:
    """Half-open time-of-day interval [start, end); wraps midnight when end < start."""

    start: dt.time
    end: dt.time

    def __post_init__(self):
        if self.start == self.end:
            raise ValueError("time window start and end must differ")

    @classmethod
    def parse(cls, text: str) -> "TimeWindow":
        try:
            a, b = text.split("-")
            return cls(dt.time.fromisoformat(a.strip()), dt.time.fromisoformat(b.strip()))
        except ValueError as exc:
            raise ValueError(f"bad time window {text!r} (expected HH:MM-HH:MM): {exc}") from None

    def contains(self, t: dt.time) -> bool:
        if self.start < self.end:
            return self.start <= t < self.end
        return t >= self.start or t < self.end

    @property
    def hours(self) -> float:
        s = self.start.hour * 3600 + self.start.minute * 60 + self.start.second
        e = self.end.hour * 3600 + self.end.minute * 60 + self.end.second
        return ((e - s) % 86400) / 3600.0

    def __str__(self):
        return f"{self.start.strftime('%H:%M')}-{self.end.strftime('%H:%M')}"


DEFAULT_NIGHT_WINDOWS: dict[CrimeType, TimeWindow] = {
    CrimeType.BURGLARY: TimeWindow(dt.time(22), dt.time(4)),
    CrimeType.ROBBERY: TimeWindow(dt.time(21), dt.time(3)),
    CrimeType.THEFT_OF_MV: TimeWindow(dt.time(22), dt.time(4)),
    CrimeType.THEFT_FROM_MV: TimeWindow(dt.time(22), dt.time(4)),
}


def classify_daynight(rec: CrimeRecord, windows: Mapping[CrimeType, TimeWindow]) -> DayNight:
    window = windows[rec.crime_type]
    return DayNight.NIGHT if window.contains(rec.timestamp.time()) else DayNight.DAY


@dataclass(frozen=True)
class CrimeSchema:
    type: str = "type"
    datetime: str = "datetime"
    x: str = "x"
    y: str = "y"


_DATETIME_FORMATS = (
    "%Y-%m-%dT%H:%M:%S.%f",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S.%f",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
)


def parse_timestamp(text: str) -> dt.datetime:
    text = text.strip()
    for fmt in _DATETIME_FORMATS:
        try:
            return dt.datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable datetime {text!r}")


@dataclass
class ParseResult:
    records: list[CrimeRecord]
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.rejected)


def _parse_coord(text) -> float:
    if text is None or not str(text).strip():
        raise ValueError("missing coordinate")
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite coordinate {text!r}")
    return v


def _check_header(reader: csv.DictReader, needed: Iterable[str], what: str):
    header = reader.fieldnames or []
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{what}: missing column(s) {missing}; header is {header}")


def parse_crimes(stream: TextIO, schema: CrimeSchema = CrimeSchema()) -> ParseResult:
    """Read crime rows; bad rows are skipped and reported with their line numbers."""
    reader = csv.DictReader(stream)
    _check_header(reader, (schema.type, schema.datetime, schema.x, schema.y), "crime CSV")
    result = ParseResult(records=[])
    for row in reader:
        line = reader.line_num
        try:
            ctype = CrimeType.parse(row[schema.type] or "")
            ts = parse_timestamp(row[schema.datetime] or "")
            loc = Point(_parse_coord(row[schema.x]), _parse_coord(row[schema.y]))
        except (ValueError, TypeError) as exc:
            log.warning("crime CSV line %d skipped: %s", line, exc)
            result.rejected.append((line, str(exc)))
            continue
        result.records.append(CrimeRecord(ctype, ts, loc))
    return result


def parse_points(stream: TextIO, x: str = "x", y: str = "y") -> ParseResult:
    """Point-only CSV (liquor licenses); returns locations in ``records``."""
    reader = csv.DictReader(stream)
    _check_header(reader, (x, y), "point CSV")
    result = ParseResult(records=[])
    for row in reader:
        try:
            result.records.append(Point(_parse_coord(row[x]), _parse_coord(row[y])))
        except (ValueError, TypeError) as exc:
            log.warning("point CSV line %d skipped: %s", reader.line_num, exc)
            result.rejected.append((reader.line_num, str(exc)))
    return result


def hourly_histogram(recs: Iterable[CrimeRecord], crime_type: CrimeType | None = None) -> np.ndarray:
    bins = np.zeros(24, dtype=np.int64)
    for r in recs:
        if crime_type is None or r.crime_type == crime_type:
            bins[r.timestamp.hour] += 1
    return bins


def median_report_time(recs: Sequence[CrimeRecord]) -> dt.time:
    """Lower median of the time-of-day values (index floor((n-1)/2) after sorting)."""
    times = sorted(r.timestamp.time() for r in recs)
    if not times:
        raise ValueError("median_report_time of an empty record set")
    return times[(len(times) - 1) // 2]


PCT_FIELDS = ("percrent", "percwhite", "percvac", "poverty", "unemployment", "no_diploma", "snap")
DEPRIVATION_FIELDS = ("poverty", "unemployment", "no_diploma", "snap")


@dataclass(frozen=True)
class BlockGroup:
    id: Hashable
    geometry: PolygonGeom
    pop: float
    percrent: float = math.nan
    percwhite: float = math.nan
    percvac: float = math.nan
    popdens: float = math.nan
    medy: float = math.nan
    poverty: float = math.nan
    unemployment: float = math.nan
    no_diploma: float = math.nan
    snap: float = math.nan

    def __post_init__(self):
        if not (self.pop >= 0):
            raise DataError(f"block group {self.id}: population must be >= 0, got {self.pop}")
        for name in PCT_FIELDS:
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 100.0:
                raise DataError(f"block group {self.id}: {name}={v} outside [0, 100]")
        if not math.isnan(self.medy) and self.medy <= 0:
            raise DataError(f"block group {self.id}: medy must be > 0, got {self.medy}")

    @property
    def centroid(self) -> Point:
        return polygon_centroid(self.geometry)


BLOCKGROUP_FIELDS = (
    "id",
    "pop",
    "percrent",
    "percwhite",
    "percvac",
    "popdens",
    "medy",
    "poverty",
    "unemployment",
    "no_diploma",
    "snap",
)


def _num(value) -> float:
    if value is None or (isinstance(value, str) and not value.strip()):
        return math.nan
    return float(value)


def load_blockgroups(
    collection: dict | TextIO,
    fields: Mapping[str, str] | None = None,
    feet_per_unit: float = 1.0,
) -> list[BlockGroup]:
    """Block groups from a GeoJSON FeatureCollection, sorted by (string) id.

    ``fields`` remaps attribute names (canonical -> property name).  When
    ``popdens`` is absent it is derived from population and polygon area.
    """
    if not isinstance(collection, dict):
        collection = json.load(collection)
    fmap = {k: k for k in BLOCKGROUP_FIELDS}
    fmap.update(fields or {})
    if collection.get("type") != "FeatureCollection":
        raise SchemaError("block groups: GeoJSON FeatureCollection expected")
    out = []
    for n, feat in enumerate(collection.get("features", [])):
        props = feat.get("properties") or {}
        if fmap["id"] in props:
            bg_id = str(props[fmap["id"]])
        elif feat.get("id") is not None:
            bg_id = str(feat["id"])
        else:
            raise SchemaError(f"block group feature {n} has no id ({fmap['id']!r})")
        if fmap["pop"] not in props:
            raise SchemaError(f"block group {bg_id}: missing population field {fmap['pop']!r}")
        geom = PolygonGeom.from_geojson(feat.get("geometry"))
        try:
            attrs = {k: _num(props.get(fmap[k])) for k in BLOCKGROUP_FIELDS if k != "id"}
        except (TypeError, ValueError) as exc:
            raise DataError(f"block group {bg_id}: bad attribute value: {exc}") from None
        if math.isnan(attrs["popdens"]):
            sq_miles = geom.area * feet_per_unit**2 / FEET_PER_MILE**2
            attrs["popdens"] = attrs["pop"] / sq_miles
        out.append(BlockGroup(id=bg_id, geometry=geom, **attrs))
    ids = [b.id for b in out]
    if len(set(ids)) != len(ids):
        raise DataError("block group ids are not unique")
    return sorted(out, key=lambda b: b.id)


@dataclass
class BlockGroupRates:
    """Per-block-group counts and per-1,000-resident rates, aligned with ``ids``.

    ``counts`` and ``rates`` are keyed by ``(CrimeType, Window)``.  Rates are
    NaN for block groups excluded for zero population.
    """

    ids: list[Hashable]
    pop: np.ndarray
    counts: dict[tuple[CrimeType, Window], np.ndarray]
    rates: dict[tuple[CrimeType, Window], np.ndarray]
    license_counts: np.ndarray
    liqdens: np.ndarray
    lnmedy: np.ndarray
    lndistcbd: np.ndarray
    excluded: list[Hashable]
    unassigned_crimes: int
    unassigned_licenses: int
    assignment: list[Hashable | None]
    night_flags: list[bool]

    def rate(self, crime_type: CrimeType, window: Window) -> np.ndarray:
        return self.rates[(crime_type, window)]

    @property
    def included(self) -> np.ndarray:
        return self.pop > 0


def assign_points(points: Sequence[Point], blockgroups: Sequence[BlockGroup]) -> list:
    """Block-group id for each point (None if outside all); shared boundaries go to the lowest id."""
    bgs = sorted(blockgroups, key=lambda b: b.id)
    xy = np.array([(p.x, p.y) for p in points], dtype=float).reshape(-1, 2)
    loc = locate_points(xy, [b.geometry for b in bgs])
    return [bgs[k].id if k >= 0 else None for k in loc]


def assign_and_rate(
    recs: Sequence[CrimeRecord],
    blockgroups: Sequence[BlockGroup],
    licenses: Sequence[Point],
    cbd: Point,
    windows: Mapping[CrimeType, TimeWindow] = DEFAULT_NIGHT_WINDOWS,
    feet_per_unit: float = 1.0,
) -> BlockGroupRates:
    bgs = sorted(blockgroups, key=lambda b: b.id)
    ids = [b.id for b in bgs]
    pos = {i: k for k, i in enumerate(ids)}
    n = len(bgs)
    assignment = assign_points([r.location for r in recs], bgs)
    night = [classify_daynight(r, windows) is DayNight.NIGHT for r in recs]
    counts = {(t, w): np.zeros(n, dtype=np.int64) for t in CRIME_TYPES for w in WINDOWS}
    unassigned = 0
    for rec, bg, is_night in zip(recs, assignment, night):
        if bg is None:
            unassigned += 1
            continue
        k = pos[bg]
        counts[(rec.crime_type, Window.ALL)][k] += 1
        counts[(rec.crime_type, Window.NIGHT if is_night else Window.DAY)][k] += 1
    if unassigned:
        log.warning("%d crime record(s) fall outside every block group", unassigned)

    lic_assign = assign_points(licenses, bgs)
    lic_counts = np.zeros(n, dtype=np.int64)
    for bg in lic_assign:
        if bg is not None:
            lic_counts[pos[bg]] += 1
    lic_unassigned = sum(a is None for a in lic_assign)

    pop = np.array([b.pop for b in bgs], dtype=float)
    ok = pop > 0
    excluded = [i for i, keep in zip(ids, ok) if not keep]
    if excluded:
        log.warning("%d zero-population block group(s) excluded from rates: %s", len(excluded), excluded)

    def per_thousand(c):
        r = np.full(n, np.nan)
        r[ok] = 1000.0 * c[ok] / pop[ok]
        return r

    medy = np.array([b.medy for b in bgs], dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        lnmedy = np.log(medy)
    dist_miles = np.array(
        [b.centroid.distance(cbd) * feet_per_unit / FEET_PER_MILE for b in bgs]
    )
    with np.errstate(divide="ignore"):
        lndistcbd = np.where(dist_miles > 0, np.log(np.where(dist_miles > 0, dist_miles, 1.0)), np.nan)

    return BlockGroupRates(
        ids=ids,
        pop=pop,
        counts=counts,
        rates={key: per_thousand(c) for key, c in counts.items()},
        license_counts=lic_counts,
        liqdens=per_thousand(lic_counts),
        lnmedy=lnmedy,
        lndistcbd=lndistcbd,
        excluded=excluded,
        unassigned_crimes=unassigned,
        unassigned_licenses=lic_unassigned,
        assignment=assignment,
        night_flags=night,
    )


def crime_table_counts(
    recs: Sequence[CrimeRecord], windows: Mapping[CrimeType, TimeWindow] = DEFAULT_NIGHT_WINDOWS
) -> dict[CrimeType, dict[str, float]]:
    """Citywide all/day/night counts and percent night per crime type."""
    out = {}
    for t in CRIME_TYPES:
        sel = [r for r in recs if r.crime_type == t]
        night = sum(classify_daynight(r, windows) is DayNight.NIGHT for r in sel)
        total = len(sel)
        out[t] = {
            "all": total,
            "day": total - night,
            "night": night,
            "pct_night": 100.0 * night / total if total else math.nan,
        }
    return out
