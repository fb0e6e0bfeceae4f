"""Deterministic synthetic city for estimator validation and pipeline fixtures."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .esda import deprivation_pca
from .geo import Point, PolygonGeom
from .ingest import (
    CRIME_TYPES,
    DEFAULT_NIGHT_WINDOWS,
    DEPRIVATION_FIELDS,
    BlockGroup,
    CrimeRecord,
    CrimeType,
    TimeWindow,
)
from .parcels import Parcel, qmi_parc, select_multiunit
from .weights import ContiguityWeights, build_queen, row_standardize

DEFAULT_BETA = {
    "CONSTANT": 4.0,
    "LIQDENS": 0.08,
    "PERCRENT": 0.03,
    "PERCWHITE": -0.04,
    "PERCVAC": 0.10,
    "DEPRIVATION": 0.6,
    "POPDENS": 0.00005,
    "QMIPARC": 0.08,
}


@dataclass(frozen=True)
class SynthConfig:
    rows: int = 12
    cols: int = 12
    cell_size: float = 2000.0
    seed: int = 2014
    rho: float = 0.4
    beta: dict = field(default_factory=lambda: dict(DEFAULT_BETA))
    noise_sd: float = 2.0
    crime_scale: float = 1.0
    night_share: dict = field(
        default_factory=lambda: {
            CrimeType.BURGLARY: 0.15,
            CrimeType.ROBBERY: 0.35,
            CrimeType.THEFT_OF_MV: 0.16,
            CrimeType.THEFT_FROM_MV: 0.12,
        }
    )
    parcel_density: float = 0.6
    licenses_per_cell: float = 1.5
    year: int = 2014

    def __post_init__(self):
        if self.rows * self.cols < 9:
            raise ValueError("synthetic grid needs at least 9 cells")
        if not -0.9 < self.rho < 0.99:
            raise ValueError("rho must lie in (-0.9, 0.99)")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")


@dataclass
class SynthCity:
    config: SynthConfig
    blockgroups: list[BlockGroup]
    parcels: list[Parcel]
    crimes: list[CrimeRecord]
    licenses: list[Point]
    boundary: PolygonGeom
    cbd: Point
    weights: ContiguityWeights
    X: np.ndarray
    X_names: list[str]
    true_rates: dict[CrimeType, np.ndarray]
    windows: dict[CrimeType, TimeWindow]


def grid_polygons(rows: int, cols: int, cell: float = 1.0, prefix: str = "BG") -> list[tuple[str, PolygonGeom]]:
    """Square lattice cells with zero-padded row-major ids."""
    width = len(str(rows * cols))
    out = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            out.append(
                (f"{prefix}{k:0{width}d}", PolygonGeom.box(c * cell, r * cell, (c + 1) * cell, (r + 1) * cell))
            )
    return out


def lattice_weights(rows: int, cols: int, standardize: bool = True) -> ContiguityWeights:
    w = build_queen(grid_polygons(rows, cols))
    return row_standardize(w) if standardize else w


def simulate_lag(w: ContiguityWeights, X: np.ndarray, beta, rho: float, noise_sd: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Forward solve y = (I - rho W)^-1 (X beta + e); returns (y, e)."""
    n = w.n
    eps = rng.normal(0.0, noise_sd, n)
    a = sparse.identity(n, format="csc") - rho * w.matrix.tocsc()
    y = np.asarray(spsolve(a, X @ np.asarray(beta, dtype=float) + eps)).ravel()
    return y, eps


def forward_residual(w: ContiguityWeights, y, X, beta, rho, eps) -> float:
    return float(np.linalg.norm(y - rho * (w.matrix @ y) - X @ np.asarray(beta) - eps))


def _draw_time(rng, window: TimeWindow, night: bool) -> dt.time:
    start = window.start.hour * 3600 + window.start.minute * 60
    length = int(round(window.hours * 3600))
    if night:
        sec = (start + int(rng.integers(0, length))) % 86400
    else:
        # daytime bell centred early afternoon, resampled until outside the night window
        while True:
            sec = int(rng.normal(13.5 * 3600, 3.5 * 3600)) % 86400
            if (sec - start) % 86400 >= length:
                break
    return dt.time(sec // 3600, (sec % 3600) // 60, sec % 60)


def _square(cx: float, cy: float, half: float) -> PolygonGeom:
    return PolygonGeom.box(cx - half, cy - half, cx + half, cy + half)


def make_city(cfg: SynthConfig = SynthConfig()) -> SynthCity:
    """Grid city with ground-truth lag-model crime rates; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    cells = grid_polygons(cfg.rows, cfg.cols, cfg.cell_size)
    n = len(cells)
    s = cfg.cell_size

    def uniform_in_cell(k: int, margin: float) -> tuple[float, float]:
        minx, miny, maxx, maxy = cells[k][1].bounds
        return (
            float(rng.uniform(minx + margin, maxx - margin)),
            float(rng.uniform(miny + margin, maxy - margin)),
        )

    pop = rng.integers(300, 2500, n).astype(float)
    latent = rng.normal(0.0, 1.0, n)
    clip = lambda v: np.clip(v, 0.0, 100.0)  # noqa: E731
    attrs = {
        "percrent": clip(50 + 15 * latent + rng.normal(0, 10, n)),
        "percwhite": clip(50 - 20 * latent + rng.normal(0, 15, n)),
        "percvac": clip(10 + 4 * latent + rng.normal(0, 3, n)),
        "poverty": clip(25 + 10 * latent + rng.normal(0, 4, n)),
        "unemployment": clip(10 + 5 * latent + rng.normal(0, 2, n)),
        "no_diploma": clip(18 + 7 * latent + rng.normal(0, 3, n)),
        "snap": clip(22 + 12 * latent + rng.normal(0, 4, n)),
    }
    medy = np.round(np.exp(10.45 - 0.35 * latent + rng.normal(0, 0.15, n)))
    sq_miles = (s / 5280.0) ** 2
    blockgroups = [
        BlockGroup(
            id=cells[k][0],
            geometry=cells[k][1],
            pop=float(pop[k]),
            popdens=float(pop[k] / sq_miles),
            medy=float(medy[k]),
            **{name: float(round(v[k], 2)) for name, v in attrs.items()},
        )
        for k in range(n)
    ]

    lic_counts = rng.poisson(cfg.licenses_per_cell, n)
    licenses = [Point(*uniform_in_cell(k, 1.0)) for k in range(n) for _ in range(lic_counts[k])]

    parcels: list[Parcel] = []
    pid = 0

    def add(geom, code, units):
        nonlocal pid
        parcels.append(Parcel(f"P{pid:06d}", geom, code, units))
        pid += 1

    half = 50.0
    for k in range(n):
        for _ in range(rng.poisson(cfg.parcel_density)):
            add(_square(*uniform_in_cell(k, 200.0), half), int(rng.choice([8830, 8899])), int(rng.integers(24, 150)))
        if rng.random() < cfg.parcel_density / 3:
            # two 12-unit buildings 20 ft apart form a qualifying complex
            cx, cy = uniform_in_cell(k, 300.0)
            add(_square(cx, cy, half), 8830, 12)
            add(_square(cx + 2 * half + 20.0, cy, half), 8830, 12)
        for _ in range(rng.poisson(2.0)):
            add(_square(*uniform_in_cell(k, 200.0), 20.0), 8810, int(rng.integers(1, 4)))
        if rng.random() < 0.2:
            add(_square(*uniform_in_cell(k, 200.0), half), 8830, int(rng.integers(11, 20)))

    selected = select_multiunit(parcels).selected
    qmi = qmi_parc([b.centroid for b in blockgroups], selected).astype(float)
    depr = deprivation_pca({f: [getattr(b, f) for b in blockgroups] for f in DEPRIVATION_FIELDS}).scores
    liqdens = 1000.0 * lic_counts / pop
    X_names = list(DEFAULT_BETA)
    cols = {
        "CONSTANT": np.ones(n),
        "LIQDENS": liqdens,
        "PERCRENT": np.array([b.percrent for b in blockgroups]),
        "PERCWHITE": np.array([b.percwhite for b in blockgroups]),
        "PERCVAC": np.array([b.percvac for b in blockgroups]),
        "DEPRIVATION": depr,
        "POPDENS": pop / sq_miles,
        "QMIPARC": qmi,
    }
    X = np.column_stack([cols[name] for name in X_names])
    beta = np.array([cfg.beta.get(name, 0.0) for name in X_names])

    w = row_standardize(build_queen(cells))
    windows = dict(DEFAULT_NIGHT_WINDOWS)
    true_rates = {}
    crimes: list[CrimeRecord] = []
    start = dt.datetime(cfg.year, 1, 1)
    for t in CRIME_TYPES:
        y, _ = simulate_lag(w, X, beta, cfg.rho, cfg.noise_sd, rng)
        y = np.maximum(y, 0.0)
        true_rates[t] = y
        counts = rng.poisson(y * pop / 1000.0 * cfg.crime_scale)
        for k in range(n):
            for _ in range(counts[k]):
                x, yy = uniform_in_cell(k, 1.0)
                night = rng.random() < cfg.night_share[t]
                day = start + dt.timedelta(days=int(rng.integers(0, 365)))
                tod = _draw_time(rng, windows[t], night)
                crimes.append(CrimeRecord(t, dt.datetime.combine(day.date(), tod), Point(x, yy)))

    boundary = PolygonGeom.box(0.0, 0.0, cfg.cols * s, cfg.rows * s)
    cbd = Point(cfg.cols * s / 2 + 0.5, cfg.rows * s / 2 + 0.5)
    return SynthCity(cfg, blockgroups, parcels, crimes, licenses, boundary, cbd, w, X, X_names, true_rates, windows)


def _feature(props: dict, geom: PolygonGeom) -> dict:
    return {"type": "Feature", "properties": props, "geometry": geom.to_geojson()}


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_inputs(city: SynthCity, directory) -> dict[str, Path]:
    """Write the city in the ingest/parcel input formats; returns the file paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "crimes": d / "crimes.csv",
        "licenses": d / "licenses.csv",
        "blockgroups": d / "blockgroups.geojson",
        "parcels": d / "parcels.geojson",
        "boundary": d / "boundary.geojson",
        "config": d / "config.json",
    }
    with paths["crimes"].open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["type", "datetime", "x", "y"])
        for c in city.crimes:
            wr.writerow([c.crime_type.value, c.timestamp.strftime("%Y-%m-%d %H:%M:%S"), repr(c.location.x), repr(c.location.y)])
    with paths["licenses"].open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "y"])
        for p in city.licenses:
            wr.writerow([repr(p.x), repr(p.y)])
    bg_feats = []
    for b in city.blockgroups:
        props = {"id": b.id, "pop": b.pop, "popdens": b.popdens, "medy": b.medy}
        props.update({f: getattr(b, f) for f in ("percrent", "percwhite", "percvac", *DEPRIVATION_FIELDS)})
        bg_feats.append(_feature(props, b.geometry))
    _dump({"type": "FeatureCollection", "features": bg_feats}, paths["blockgroups"])
    _dump(
        {
            "type": "FeatureCollection",
            "features": [
                _feature({"id": p.id, "landuse_code": p.landuse_code, "units": p.units}, p.geometry)
                for p in city.parcels
            ],
        },
        paths["parcels"],
    )
    _dump({"type": "FeatureCollection", "features": [_feature({"name": "city"}, city.boundary)]}, paths["boundary"])
    _dump(
        {
            "crimes": paths["crimes"].name,
            "blockgroups": paths["blockgroups"].name,
            "parcels": paths["parcels"].name,
            "licenses": paths["licenses"].name,
            "boundary": paths["boundary"].name,
            "cbd": [city.cbd.x, city.cbd.y],
            "feet_per_unit": 1.0,
            "seed": city.config.seed,
        },
        paths["config"],
    )
    return paths
