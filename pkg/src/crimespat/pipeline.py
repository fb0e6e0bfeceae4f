"""End-to-end batch pipeline over a cached, versioned workspace.

Each stage reads raw inputs and/or upstream intermediates, writes its own
intermediates under ``<out>/.workspace`` and records a fingerprint of what it
consumed.  Downstream stages refuse to run against missing or stale upstream
results.  ``report`` renders the final tables and layers from the cache.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from . import __version__
from .errors import ConfigError, CrimeSpatError, DataError, IslandError, StaleCacheError
from .esda import (
    HotSpotClass,
    correlation_tables,
    deprivation_pca,
    describe,
    getis_ord_gstar,
    hotspot_profile,
    morans_i,
    morans_permutation,
)
from .geo import Point, PolygonGeom
from .ingest import (
    CRIME_TYPES,
    DEFAULT_NIGHT_WINDOWS,
    DEPRIVATION_FIELDS,
    CrimeRecord,
    CrimeSchema,
    CrimeType,
    TimeWindow,
    Window,
    assign_and_rate,
    crime_table_counts,
    hourly_histogram,
    load_blockgroups,
    median_report_time,
    parse_crimes,
    parse_points,
)
from .parcels import (
    coverage_fraction,
    crime_parcel_distances,
    load_parcels,
    load_parcels_csv,
    parcel_histograms,
    qmi_parc,
    select_multiunit,
)
from .slm import FitFailure, fit_all
from .weights import (
    ContiguityWeights,
    build_queen,
    drop_islands,
    read_weights,
    row_standardize,
    with_self,
    write_weights,
)

log = logging.getLogger(__name__)

WORKSPACE_VERSION = 1
WORKSPACE_DIR = ".workspace"

STAGES = ("ingest", "select-parcels", "weights", "moran", "hotspots", "correlate", "regress", "report")
UPSTREAM: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "select-parcels": ("ingest",),
    "weights": (),
    "moran": ("ingest", "weights"),
    "hotspots": ("ingest", "weights", "select-parcels"),
    "correlate": ("ingest", "select-parcels"),
    "regress": ("ingest", "weights", "select-parcels"),
    "report": ("ingest", "select-parcels", "weights", "moran", "hotspots", "correlate", "regress"),
}
STAGE_FILES = {
    "ingest": ("crimes", "blockgroups", "licenses"),
    "select-parcels": ("parcels", "boundary"),
    "weights": ("blockgroups",),
}
STAGE_PARAMS = {
    "ingest": ("cbd", "feet_per_unit", "night_windows", "crime_columns", "license_columns", "blockgroup_fields"),
    "select-parcels": (
        "feet_per_unit",
        "landuse_codes",
        "unit_threshold",
        "cluster_min_units",
        "cluster_gap_ft",
        "radius_miles",
        "grid_step_ft",
        "unit_bin_width",
        "parcel_fields",
    ),
    "weights": ("contiguity_tol", "drop_islands", "blockgroup_fields", "feet_per_unit"),
    "moran": ("permutations", "seed"),
    "hotspots": ("gstar_z", "profile_cold"),
    "correlate": (),
    "regress": (),
    "report": (),
}

OUTPUT_FILES = (
    "table1_counts.csv",
    "table2_distances.csv",
    "table3_moran.csv",
    "table4_summary.csv",
    "table5_hotspot_profiles.csv",
    "table6_correlations.csv",
    "table7_night_diffs.csv",
    "table8_regressions.csv",
    "fig2_histograms.csv",
    "fig3_parcel_histograms.csv",
    "blockgroups_out.geojson",
    "parcels_selected.geojson",
    "run_manifest.json",
)

CONVENTIONS = {
    "moran_weights": "row-standardized Queen contiguity (order one)",
    "moran_inference": "total randomization, two-sided pseudo p = (1 + #extreme) / (permutations + 1)",
    "gstar_weights": "binary Queen contiguity with w_ii = 1",
    "gstar_spread": "population standard deviation over all analysed units",
    "lag_weights": "row-standardized Queen contiguity",
    "lag_estimator": "concentrated maximum likelihood, eigenvalue log-determinant",
    "lag_inference": "inverse finite-difference Hessian of the full log-likelihood; two-sided normal p-values",
    "aic_k": "number of betas + 1 (rho); sigma2 not counted",
    "pseudo_r2": "squared correlation of observed y and (I - rho W)^-1 X beta",
    "rates": "crimes (and liquor licenses) per 1,000 residents",
    "night_windows": "half-open [start, end) time-of-day intervals",
    "hotspot_sd": "sample standard deviation (ddof = 1)",
    "deprivation": "first principal component of the correlation matrix of poverty, unemployment, no_diploma, snap",
}

LABELS = {
    CrimeType.BURGLARY: "BURG",
    CrimeType.THEFT_FROM_MV: "TFMV",
    CrimeType.ROBBERY: "ROB",
    CrimeType.THEFT_OF_MV: "TMV",
}


@dataclass
class RunConfig:
    crimes: str | None = None
    blockgroups: str | None = None
    parcels: str | None = None
    licenses: str | None = None
    boundary: str | None = None
    cbd: tuple[float, float] | None = None
    feet_per_unit: float = 1.0
    night_windows: dict[str, str] = field(default_factory=dict)
    landuse_codes: list[int] = field(default_factory=lambda: [8830, 8899])
    unit_threshold: int = 24
    cluster_min_units: int = 10
    cluster_gap_ft: float = 30.0
    radius_miles: float = 0.25
    grid_step_ft: float = 100.0
    unit_bin_width: float = 10.0
    gstar_z: float = 1.96
    profile_cold: bool = False
    permutations: int = 999
    seed: int | None = 12345
    drop_islands: bool = False
    contiguity_tol: float = 1e-6
    crime_columns: dict[str, str] = field(default_factory=dict)
    license_columns: dict[str, str] = field(default_factory=dict)
    blockgroup_fields: dict[str, str] = field(default_factory=dict)
    parcel_fields: dict[str, str] = field(default_factory=dict)
    out: str = "out"

    @classmethod
    def load(cls, config_path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        """Defaults < JSON config file < explicit overrides (None values ignored)."""
        values: dict[str, Any] = {}
        known = {f.name for f in fields(cls)}
        if config_path is not None:
            path = Path(config_path)
            try:
                raw = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
            for key in ("crimes", "blockgroups", "parcels", "licenses", "boundary"):
                if raw.get(key) is not None and not Path(raw[key]).is_absolute():
                    raw[key] = str(path.parent / raw[key])
            values.update(raw)
        for key, v in (overrides or {}).items():
            if v is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown option {key!r}")
            if key == "night_windows":
                values["night_windows"] = {**values.get("night_windows", {}), **v}
            else:
                values[key] = v
        cfg = cls(**values)
        if cfg.cbd is not None:
            cfg.cbd = (float(cfg.cbd[0]), float(cfg.cbd[1]))
        return cfg

    def windows(self) -> dict[CrimeType, TimeWindow]:
        out = dict(DEFAULT_NIGHT_WINDOWS)
        for key, text in self.night_windows.items():
            try:
                out[CrimeType.parse(key)] = TimeWindow.parse(text)
            except ValueError as exc:
                raise ConfigError(f"night window {key}={text}: {exc}") from None
        return out

    def validate(self, stage: str) -> None:
        for key in STAGE_FILES.get(stage, ()):
            path = getattr(self, key)
            if path is None:
                if key == "boundary":
                    continue
                raise ConfigError(f"stage {stage!r} needs --{key}")
            if not os.access(path, os.R_OK) or not Path(path).is_file():
                raise ConfigError(f"{key} input {path!r} is not a readable file")
        if stage == "ingest" and self.cbd is None:
            raise ConfigError("a CBD point is required (--cbd-x/--cbd-y or config 'cbd')")
        if self.permutations and self.seed is None:
            raise ConfigError("a seed is required whenever permutations > 0")
        if self.permutations and self.permutations < 99:
            raise ConfigError("permutations must be 0 or at least 99")
        if not self.feet_per_unit > 0:
            raise ConfigError("feet_per_unit must be positive")
        self.windows()
        out = Path(self.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from None
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")

    def as_dict(self) -> dict:
        return asdict(self)


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (Path,)):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


class Workspace:
    """On-disk stage cache with fingerprint-based staleness checks."""

    def __init__(self, out_dir: str | os.PathLike):
        self.out = Path(out_dir)
        self.dir = self.out / WORKSPACE_DIR
        self.state_path = self.dir / "state.json"
        self._hashes: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    def state(self) -> dict:
        if not self.state_path.exists():
            return {"version": WORKSPACE_VERSION, "stages": {}}
        state = json.loads(self.state_path.read_text())
        if state.get("version") != WORKSPACE_VERSION:
            raise StaleCacheError(
                f"workspace version {state.get('version')} != {WORKSPACE_VERSION}; re-run from ingest"
            )
        return state

    def _hash(self, path: str) -> str:
        if path not in self._hashes:
            self._hashes[path] = file_hash(path)
        return self._hashes[path]

    def input_hashes(self, cfg: RunConfig, stage: str) -> dict[str, str | None]:
        out = {}
        for key in STAGE_FILES.get(stage, ()):
            p = getattr(cfg, key)
            out[key] = self._hash(p) if p else None
        return out

    def fingerprint(self, stage: str, cfg: RunConfig) -> str:
        params = {k: getattr(cfg, k) for k in STAGE_PARAMS[stage]}
        if stage in ("moran", "hotspots", "correlate", "regress"):
            params["drop_islands"] = cfg.drop_islands
        body = {
            "stage": stage,
            "version": WORKSPACE_VERSION,
            "files": self.input_hashes(cfg, stage),
            "params": params,
            "upstream": {u: self.fingerprint(u, cfg) for u in UPSTREAM[stage]},
        }
        return hashlib.sha256(_dumps(body).encode()).hexdigest()

    def require(self, stage: str, cfg: RunConfig) -> None:
        stages = self.state()["stages"]
        for up in UPSTREAM[stage]:
            rec = stages.get(up)
            if rec is None:
                raise StaleCacheError(f"stage {stage!r} needs cached results of {up!r}; run `{up}` first")
            try:
                current = self.fingerprint(up, cfg)
            except OSError as exc:
                raise StaleCacheError(f"cannot verify inputs of {up!r}: {exc}") from None
            if rec["fingerprint"] != current:
                raise StaleCacheError(
                    f"cached {up!r} results are stale (inputs or parameters changed); re-run `{up}`"
                )

    def complete(self, stage: str, cfg: RunConfig, outputs: Iterable[str], warnings: list[str], summary: dict) -> None:
        state = self.state()
        state["stages"][stage] = {
            "fingerprint": self.fingerprint(stage, cfg),
            "inputs": self.input_hashes(cfg, stage),
            "outputs": sorted(outputs),
            "warnings": warnings,
            "summary": summary,
        }
        self.dir.mkdir(parents=True, exist_ok=True)
        self.state_path.write_text(_dumps(state))


class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_cell(v) for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(text: str) -> float:
    return float(text) if text not in ("", None) else math.nan


def _disp(v: float, digits: int) -> str:
    if v is None or not math.isfinite(v):
        return ""
    return f"{v:.{digits}f}"


def _cells():
    for t in CRIME_TYPES:
        for w in (Window.ALL, Window.DAY, Window.NIGHT):
            yield t, w


def _key(t: CrimeType, w: Window) -> str:
    return f"{t.value}_{w.value}"


# ---------------------------------------------------------------- stages


def stage_ingest(cfg: RunConfig, ws: Workspace) -> dict:
    windows = cfg.windows()
    with open(cfg.crimes, newline="") as fh:
        parsed = parse_crimes(fh, CrimeSchema(**cfg.crime_columns))
    with open(cfg.licenses, newline="") as fh:
        lic = parse_points(fh, **cfg.license_columns)
    try:
        with open(cfg.blockgroups) as fh:
            bgs = load_blockgroups(fh, cfg.blockgroup_fields, cfg.feet_per_unit)
    except json.JSONDecodeError as exc:
        raise DataError(f"block groups: invalid JSON: {exc}") from None
    if not bgs:
        raise DataError("no block groups in input")
    cbd = Point(*cfg.cbd)
    recs = parsed.records
    order = sorted(range(len(recs)), key=lambda k: (recs[k].crime_type.value, recs[k].timestamp, recs[k].location.x, recs[k].location.y))
    recs = [recs[k] for k in order]
    rates = assign_and_rate(recs, bgs, lic.records, cbd, windows, cfg.feet_per_unit)
    try:
        depr = deprivation_pca({f: [getattr(b, f) for b in bgs] for f in DEPRIVATION_FIELDS})
    except ValueError as exc:
        raise DataError(f"deprivation index: {exc}") from None

    write_csv(
        ws.path("crimes.csv"),
        ["type", "datetime", "x", "y", "window", "blockgroup"],
        (
            [r.crime_type.value, r.timestamp.isoformat(), r.location.x, r.location.y,
             "Night" if night else "Day", bg]
            for r, night, bg in zip(recs, rates.night_flags, rates.assignment)
        ),
    )
    centroids = [b.centroid for b in bgs]
    header = [
        "id", "included", "pop", "percrent", "percwhite", "percvac", "popdens", "medy", "lnmedy",
        "lndistcbd", "license_count", "liqdens", "deprivation", "centroid_x", "centroid_y",
    ]
    header += [f"count_{_key(t, w)}" for t, w in _cells()] + [f"rate_{_key(t, w)}" for t, w in _cells()]
    rows = []
    for k, b in enumerate(bgs):
        row = [
            b.id, bool(rates.included[k]), b.pop, b.percrent, b.percwhite, b.percvac, b.popdens, b.medy,
            rates.lnmedy[k], rates.lndistcbd[k], rates.license_counts[k], rates.liqdens[k],
            depr.scores[k], centroids[k].x, centroids[k].y,
        ]
        row += [rates.counts[(t, w)][k] for t, w in _cells()]
        row += [rates.rates[(t, w)][k] for t, w in _cells()]
        rows.append(row)
    write_csv(ws.path("blockgroups.csv"), header, rows)

    table1 = crime_table_counts(recs, windows)
    fig2 = {}
    for t in CRIME_TYPES:
        sel = [r for r in recs if r.crime_type == t]
        fig2[t.value] = {
            "hist": hourly_histogram(sel, t).tolist(),
            "median": median_report_time(sel).isoformat() if sel else None,
        }
    summary = {
        "parsed": len(recs),
        "skipped": parsed.skipped,
        "rejected": parsed.rejected[:100],
        "licenses": len(lic.records),
        "licenses_skipped": lic.skipped,
        "unassigned_crimes": rates.unassigned_crimes,
        "unassigned_licenses": rates.unassigned_licenses,
        "excluded_zero_pop": rates.excluded,
        "table1": {t.value: v for t, v in table1.items()},
        "fig2": fig2,
        "windows": {t.value: str(w) for t, w in windows.items()},
        "deprivation": {
            "indicators": depr.indicators,
            "dropped": depr.dropped,
            "loadings": depr.loadings.tolist(),
            "explained_share": depr.explained_share,
        },
    }
    ws.path("ingest.json").write_text(_dumps(summary))
    return summary


def _read_crimes(ws: Workspace) -> tuple[list[CrimeRecord], list[bool]]:
    recs, night = [], []
    for row in read_csv(ws.path("crimes.csv")):
        recs.append(
            CrimeRecord(CrimeType(row["type"]), dt.datetime.fromisoformat(row["datetime"]), Point(float(row["x"]), float(row["y"])))
        )
        night.append(row["window"] == "Night")
    return recs, night


def _load_parcels(path: str, fields_map):
    with open(path, newline="") as fh:
        if path.lower().endswith(".csv"):
            return load_parcels_csv(fh, fields_map)
        try:
            return load_parcels(fh, fields_map)
        except json.JSONDecodeError as exc:
            raise DataError(f"parcels: invalid JSON: {exc}") from None


def _load_boundary(path: str) -> PolygonGeom:
    obj = json.loads(Path(path).read_text())
    if obj.get("type") == "FeatureCollection":
        feats = obj.get("features") or []
        if len(feats) != 1:
            raise DataError("boundary FeatureCollection must contain exactly one feature")
        obj = feats[0]
    if obj.get("type") == "Feature":
        obj = obj.get("geometry")
    return PolygonGeom.from_geojson(obj)


def stage_select_parcels(cfg: RunConfig, ws: Workspace) -> dict:
    parcels = _load_parcels(cfg.parcels, cfg.parcel_fields)
    sel = select_multiunit(
        parcels,
        codes=cfg.landuse_codes,
        unit_threshold=cfg.unit_threshold,
        cluster_min_units=cfg.cluster_min_units,
        cluster_gap_ft=cfg.cluster_gap_ft,
        feet_per_unit=cfg.feet_per_unit,
    )
    cluster_of = sel.cluster_of()
    feats = [
        {
            "type": "Feature",
            "properties": {
                "id": p.id,
                "landuse_code": p.landuse_code,
                "units": p.units,
                "cluster": cluster_of.get(p.id),
            },
            "geometry": p.geometry.to_geojson(),
        }
        for p in sel.selected
    ]
    ws.path("parcels_selected.geojson").write_text(_dumps({"type": "FeatureCollection", "features": feats}))

    bg_rows = read_csv(ws.path("blockgroups.csv"))
    centroids = [Point(float(r["centroid_x"]), float(r["centroid_y"])) for r in bg_rows]
    qmi = qmi_parc(centroids, sel.selected, cfg.radius_miles, cfg.feet_per_unit)
    write_csv(ws.path("qmiparc.csv"), ["id", "qmiparc"], ([r["id"], q] for r, q in zip(bg_rows, qmi)))

    recs, night = _read_crimes(ws)
    dist_rows = []
    if sel.selected and recs:
        dist = crime_parcel_distances(recs, night, sel.selected, cfg.radius_miles, cfg.feet_per_unit)
        dist_rows = [
            [s.crime_type.value, s.window.value, s.n, s.n_within, s.share_within, s.median_miles]
            for s in dist.summaries
        ]
    elif not sel.selected:
        log.warning("no parcels selected; crime-to-parcel distances not computed")
    write_csv(
        ws.path("parcel_distances.csv"),
        ["crime_type", "window", "n", "n_within", "share_within", "median_miles"],
        dist_rows,
    )

    coverage = math.nan
    if cfg.boundary:
        coverage = coverage_fraction(
            _load_boundary(cfg.boundary), sel.selected, cfg.radius_miles, cfg.grid_step_ft, cfg.feet_per_unit
        )
    else:
        log.warning("no city boundary given; coverage fraction not computed")
    dist_hist, unit_hist = parcel_histograms(
        sel.selected, Point(*_ingest_summary(ws)["cbd"]), cfg.feet_per_unit, unit_bin_width=cfg.unit_bin_width
    )
    summary = {
        "n_parcels": len(parcels),
        "n_selected": len(sel.selected),
        "n_clusters": len(sel.clusters),
        "n_qualifying_clusters": sum(c.qualifies for c in sel.clusters),
        "coverage_fraction": coverage,
        "distance_histogram": dist_hist.rows(),
        "unit_histogram": unit_hist.rows(),
    }
    ws.path("parcels.json").write_text(_dumps(summary))
    return summary


def _ingest_summary(ws: Workspace) -> dict:
    return json.loads(ws.path("ingest.json").read_text())


def stage_weights(cfg: RunConfig, ws: Workspace) -> dict:
    with open(cfg.blockgroups) as fh:
        bgs = load_blockgroups(fh, cfg.blockgroup_fields, cfg.feet_per_unit)
    w = build_queen([(b.id, b.geometry) for b in bgs], cfg.contiguity_tol)
    islands = w.islands
    ws.dir.mkdir(parents=True, exist_ok=True)
    ws.path("islands.txt").write_text("".join(f"{i}\n" for i in islands))
    if islands and not cfg.drop_islands:
        with open(ws.path("weights.txt"), "w") as fh:
            write_weights(w, fh)
        raise IslandError(islands)
    if islands:
        log.warning("dropping %d island block group(s): %s", len(islands), islands)
        w = drop_islands(w)
    with open(ws.path("weights.txt"), "w") as fh:
        write_weights(w, fh)
    return {"n": w.n, "links": int(w.adjacency.nnz), "islands": islands, "dropped_islands": bool(islands)}


@dataclass
class AnalysisTable:
    ids: list[str]
    columns: dict[str, np.ndarray]
    included: np.ndarray


def _analysis_table(ws: Workspace, with_qmi: bool = True) -> AnalysisTable:
    rows = read_csv(ws.path("blockgroups.csv"))
    ids = [r["id"] for r in rows]
    cols = {k: np.array([_f(r[k]) for r in rows]) for k in rows[0] if k not in ("id", "included")} if rows else {}
    if with_qmi:
        q = {r["id"]: float(r["qmiparc"]) for r in read_csv(ws.path("qmiparc.csv"))}
        cols["qmiparc"] = np.array([q.get(i, math.nan) for i in ids])
    return AnalysisTable(ids, cols, np.array([r["included"] == "true" for r in rows], dtype=bool))


def _spatial_units(table: AnalysisTable, ws: Workspace, cfg: RunConfig) -> tuple[np.ndarray, ContiguityWeights]:
    """Positions of analysed units in ``table`` and the matching binary weights."""
    with open(ws.path("weights.txt")) as fh:
        w = read_weights(fh)
    in_w = set(w.ids)
    keep = [i for i, ok in zip(table.ids, table.included) if ok and i in in_w]
    wb = w.subset(keep)
    if wb.islands:
        if not cfg.drop_islands:
            raise IslandError(wb.islands)
        log.warning("dropping %d block group(s) isolated after excluding zero-population units", len(wb.islands))
        wb = drop_islands(wb)
    pos = {i: k for k, i in enumerate(table.ids)}
    return np.array([pos[i] for i in wb.ids], dtype=int), wb


def stage_moran(cfg: RunConfig, ws: Workspace, crime: CrimeType | None = None, window: Window | None = None) -> dict:
    table = _analysis_table(ws, with_qmi=False)
    idx, wb = _spatial_units(table, ws, cfg)
    wr = row_standardize(wb)
    rows = []
    for t, w in _cells():
        if (crime and t != crime) or (window and w != window):
            continue
        x = table.columns[f"rate_{_key(t, w)}"][idx]
        try:
            if cfg.permutations:
                res = morans_permutation(x, wr, cfg.permutations, cfg.seed)
                rows.append([t.value, w.value, res.I, res.expected, res.p_perm, res.permutations, res.seed, wr.n, ""])
            else:
                rows.append([t.value, w.value, morans_i(x, wr), -1.0 / (wr.n - 1), math.nan, 0, cfg.seed, wr.n, ""])
        except (CrimeSpatError, ValueError) as exc:
            log.warning("Moran's I %s/%s failed: %s", t.value, w.value, exc)
            rows.append([t.value, w.value, math.nan, math.nan, math.nan, cfg.permutations, cfg.seed, wr.n, str(exc)])
    if crime or window:
        parts = [p.value.lower() for p in (crime, window) if p]
        path = Path(cfg.out) / f"moran_{'_'.join(parts)}.csv"
    else:
        path = ws.path("moran.csv")
    write_csv(path, ["crime_type", "window", "I", "expected", "p_perm", "permutations", "seed", "n", "error"], rows)
    out = {"rows": len(rows), "n": wr.n}
    if crime or window:
        out["path"] = str(path)
    return out


PROFILE_VARS = (
    ("Deprivation", "deprivation"),
    ("QmiParc", "qmiparc"),
    ("LiqDens", "liqdens"),
    ("Percwhite", "percwhite"),
    ("Percrent", "percrent"),
    ("MedY", "medy"),
)


def stage_hotspots(cfg: RunConfig, ws: Workspace) -> dict:
    table = _analysis_table(ws)
    idx, wb = _spatial_units(table, ws, cfg)
    wg = with_self(wb)
    gz_cols, class_cols = {}, {}
    prof_rows = []
    classes = (HotSpotClass.HOT, HotSpotClass.COLD) if cfg.profile_cold else (HotSpotClass.HOT,)
    profile_vars = {label: table.columns[col][idx] for label, col in PROFILE_VARS}
    for t, w in _cells():
        x = table.columns[f"rate_{_key(t, w)}"][idx]
        try:
            g = getis_ord_gstar(x, wg, cfg.gstar_z)
        except (CrimeSpatError, ValueError) as exc:
            log.warning("G* %s/%s failed: %s", t.value, w.value, exc)
            gz_cols[_key(t, w)] = [math.nan] * wg.n
            class_cols[_key(t, w)] = [""] * wg.n
            continue
        gz_cols[_key(t, w)] = g.g_z.tolist()
        class_cols[_key(t, w)] = [c.value for c in g.classes]
        if w is Window.ALL:
            continue
        prof = hotspot_profile(g, profile_vars, classes)
        if prof.empty:
            prof_rows.append([t.value, w.value, HotSpotClass.HOT.value, "", 0, math.nan, math.nan, "true"])
        for r in prof.rows:
            prof_rows.append([t.value, w.value, r.cls.value, r.variable, r.n, r.mean, r.sd, "false"])
    header = ["id"] + [f"g_z_{k}" for k in gz_cols] + [f"class_{k}" for k in class_cols]
    write_csv(
        ws.path("gstar.csv"),
        header,
        ([wg.ids[k]] + [gz_cols[c][k] for c in gz_cols] + [class_cols[c][k] for c in class_cols] for k in range(wg.n)),
    )
    write_csv(
        ws.path("hotspot_profiles.csv"),
        ["crime_type", "window", "class", "variable", "n", "mean", "sd", "empty"],
        prof_rows,
    )
    return {"n": wg.n, "threshold": cfg.gstar_z}


CORR_COVARIATES = (
    ("LIQDENS", "liqdens"),
    ("PERCRENT", "percrent"),
    ("PERCWHITE", "percwhite"),
    ("PERCVAC", "percvac"),
    ("POPDENS", "popdens"),
    ("LNMEDY", "lnmedy"),
    ("DEPRIVATION", "deprivation"),
    ("QMIPARC", "qmiparc"),
    ("LNDISTCBD", "lndistcbd"),
)


def stage_correlate(cfg: RunConfig, ws: Workspace) -> dict:
    table = _analysis_table(ws)
    inc = table.included
    all_c = {LABELS[t]: table.columns[f"rate_{_key(t, Window.ALL)}"][inc] for t in LABELS}
    night_c = {LABELS[t] + "N": table.columns[f"rate_{_key(t, Window.NIGHT)}"][inc] for t in LABELS}
    cov = {label: table.columns[col][inc] for label, col in CORR_COVARIATES}
    tabs = correlation_tables(all_c, night_c, cov)
    rows = []
    for name, mat in (("full", tabs.full), ("night", tabs.night), ("diff", tabs.diff)):
        rows += [[name, a, b, v] for a, b, v in mat.cells()]
    write_csv(ws.path("correlations.csv"), ["matrix", "row", "col", "value"], rows)
    return {"n": int(inc.sum()), "crime_columns": len(all_c)}


REGRESSORS = (
    ("LIQDENS", "liqdens"),
    ("PERCRENT", "percrent"),
    ("PERCWHITE", "percwhite"),
    ("PERCVAC", "percvac"),
    ("DEPRIVATION", "deprivation"),
    ("POPDENS", "popdens"),
    ("QMIPARC", "qmiparc"),
)


def stage_regress(cfg: RunConfig, ws: Workspace) -> dict:
    table = _analysis_table(ws)
    idx, wb = _spatial_units(table, ws, cfg)
    wr = row_standardize(wb)
    ids = list(wb.ids)
    covariates = {label: table.columns[col][idx] for label, col in REGRESSORS}
    responses = {_key(t, w): table.columns[f"rate_{_key(t, w)}"][idx] for t, w in _cells()}
    fits = fit_all(responses, covariates, ids, wr)
    rows = []
    failures = 0
    for (t, w) in _cells():
        fit = fits[_key(t, w)]
        if isinstance(fit, FitFailure):
            failures += 1
            rows.append([t.value, w.value, "error", math.nan, math.nan, math.nan, "", fit.error])
            continue
        for term, est, se, p in fit.coefficients():
            rows.append([t.value, w.value, term, est, se, p, bool(p < 0.05) if math.isfinite(p) else "", ""])
        for term, val in (("R2", fit.pseudo_r2), ("AIC", fit.aic), ("loglik", fit.loglik),
                          ("sigma2", fit.sigma2), ("n", fit.n), ("k", fit.k)):
            rows.append([t.value, w.value, term, val, math.nan, math.nan, "", "; ".join(fit.notes)])
    write_csv(
        ws.path("regressions.csv"),
        ["crime_type", "window", "term", "estimate", "se", "p", "significant", "note"],
        rows,
    )
    return {"fits": 12 - failures, "failures": failures, "n": len(ids)}


# ---------------------------------------------------------------- report


TABLE4_VARS = [(f"{t.value}_{w.value}", f"rate_{_key(t, w)}") for t, w in _cells()] + [
    ("LiqDens", "liqdens"),
    ("Percrent", "percrent"),
    ("Pop", "pop"),
    ("Percwhite", "percwhite"),
    ("Percvac", "percvac"),
    ("Popdens", "popdens"),
    ("MedY", "medy"),
    ("Deprivation", "deprivation"),
    ("QmiParc", "qmiparc"),
]


def stage_report(cfg: RunConfig, ws: Workspace) -> dict:
    out = Path(cfg.out)
    ing = _ingest_summary(ws)
    par = json.loads(ws.path("parcels.json").read_text())

    rows = []
    for t in CRIME_TYPES:
        c = ing["table1"][t.value]
        rows.append([t.value, c["all"], c["day"], c["night"], c["pct_night"], _disp(c["pct_night"], 2)])
    write_csv(out / "table1_counts.csv", ["crime_type", "all", "day", "night", "pct_night", "pct_night_display"], rows)

    rows = []
    for r in read_csv(ws.path("parcel_distances.csv")):
        share, med = _f(r["share_within"]), _f(r["median_miles"])
        within = f"{r['n_within']} ({100 * share:.1f}%)" if math.isfinite(share) else ""
        rows.append([r["crime_type"], r["window"], int(r["n"]), int(r["n_within"]), share, med, within, _disp(med, 3)])
    write_csv(
        out / "table2_distances.csv",
        ["crime_type", "window", "n", "n_within", "share_within", "median_miles", "within_display", "median_display"],
        rows,
    )

    rows = []
    for r in read_csv(ws.path("moran.csv")):
        i_val = _f(r["I"])
        rows.append([r["crime_type"], r["window"], i_val, _f(r["expected"]), _f(r["p_perm"]), r["permutations"],
                     r["seed"], r["n"], _disp(i_val, 3), r["error"]])
    write_csv(
        out / "table3_moran.csv",
        ["crime_type", "window", "I", "expected", "p_perm", "permutations", "seed", "n", "I_display", "error"],
        rows,
    )

    table = _analysis_table(ws)
    inc = table.included
    stats = describe({label: table.columns[col][inc] for label, col in TABLE4_VARS})
    write_csv(
        out / "table4_summary.csv",
        ["variable", "n", "mean", "sd", "min", "max", "mean_display", "sd_display", "min_display", "max_display"],
        ([s.variable, s.n, s.mean, s.sd, s.min, s.max, _disp(s.mean, 2), _disp(s.sd, 2), _disp(s.min, 2), _disp(s.max, 2)] for s in stats),
    )

    rows = []
    for r in read_csv(ws.path("hotspot_profiles.csv")):
        m, s = _f(r["mean"]), _f(r["sd"])
        rows.append([r["crime_type"], r["window"], r["class"], r["variable"], int(r["n"]), m, s, r["empty"], _disp(m, 2), _disp(s, 2)])
    write_csv(
        out / "table5_hotspot_profiles.csv",
        ["crime_type", "window", "class", "variable", "n", "mean", "sd", "empty", "mean_display", "sd_display"],
        rows,
    )

    corr = read_csv(ws.path("correlations.csv"))
    write_csv(
        out / "table6_correlations.csv",
        ["row", "col", "rho", "rho_display"],
        ([r["row"], r["col"], _f(r["value"]), _disp(_f(r["value"]), 2)] for r in corr if r["matrix"] == "full"),
    )
    night = {(r["row"], r["col"]): _f(r["value"]) for r in corr if r["matrix"] == "night"}
    night_crimes = {LABELS[t] + "N" for t in LABELS}
    rows = []
    for r in corr:
        if r["matrix"] != "diff" or r["col"] not in night_crimes:
            continue
        nv, dv = night[(r["row"], r["col"])], _f(r["value"])
        rows.append([r["row"], r["col"], nv, dv, _disp(nv, 2), _disp(dv, 2)])
    write_csv(
        out / "table7_night_diffs.csv",
        ["row", "col", "night_rho", "diff", "night_display", "diff_display"],
        rows,
    )

    rows = []
    for r in read_csv(ws.path("regressions.csv")):
        est, se, p = _f(r["estimate"]), _f(r["se"]), _f(r["p"])
        if r["term"] in ("n", "k"):
            display = str(int(est))
        elif r["term"] in ("AIC", "loglik"):
            display = _disp(est, 2)
        elif r["term"] == "error":
            display = ""
        else:
            display = _disp(est, 2) + (f" ({p:.3f})" if math.isfinite(p) else "")
        rows.append([r["crime_type"], r["window"], r["term"], est, se, p, r["significant"], display, r["note"]])
    write_csv(
        out / "table8_regressions.csv",
        ["crime_type", "window", "term", "estimate", "se", "p", "significant", "display", "note"],
        rows,
    )

    rows = []
    for t in CRIME_TYPES:
        f2 = ing["fig2"][t.value]
        rows.append([t.value, *f2["hist"], sum(f2["hist"]), f2["median"] or ""])
    write_csv(out / "fig2_histograms.csv", ["crime_type", *[f"h{h:02d}" for h in range(24)], "total", "median_time"], rows)

    rows = [["distance_miles", a, b, c] for a, b, c in par["distance_histogram"]]
    rows += [["units", a, b, c] for a, b, c in par["unit_histogram"]]
    write_csv(out / "fig3_parcel_histograms.csv", ["histogram", "bin_lo", "bin_hi", "count"], rows)

    gstar = {r["id"]: r for r in read_csv(ws.path("gstar.csv"))}
    with open(cfg.blockgroups) as fh:
        bgs = load_blockgroups(fh, cfg.blockgroup_fields, cfg.feet_per_unit)
    pos = {i: k for k, i in enumerate(table.ids)}
    feats = []
    for b in bgs:
        k = pos[b.id]
        props: dict[str, Any] = {"id": b.id, "included": bool(table.included[k])}
        for name in ("pop", "liqdens", "deprivation", "qmiparc", "lnmedy", "lndistcbd"):
            props[name] = _json_num(table.columns[name][k])
        for t, w in _cells():
            props[f"rate_{_key(t, w)}"] = _json_num(table.columns[f"rate_{_key(t, w)}"][k])
            g = gstar.get(b.id)
            props[f"g_z_{_key(t, w)}"] = _json_num(_f(g[f"g_z_{_key(t, w)}"])) if g else None
            props[f"class_{_key(t, w)}"] = (g[f"class_{_key(t, w)}"] or None) if g else None
        feats.append({"type": "Feature", "properties": props, "geometry": b.geometry.to_geojson()})
    (out / "blockgroups_out.geojson").write_text(_dumps({"type": "FeatureCollection", "features": feats}))
    (out / "parcels_selected.geojson").write_bytes(ws.path("parcels_selected.geojson").read_bytes())
    return {"outputs": [f for f in OUTPUT_FILES if f != "run_manifest.json"]}


def _json_num(v: float):
    v = float(v)
    return v if math.isfinite(v) else None


STAGE_FUNCS: dict[str, Callable[..., dict]] = {
    "ingest": stage_ingest,
    "select-parcels": stage_select_parcels,
    "weights": stage_weights,
    "moran": stage_moran,
    "hotspots": stage_hotspots,
    "correlate": stage_correlate,
    "regress": stage_regress,
    "report": stage_report,
}


def run_stage(stage: str, cfg: RunConfig, **kwargs) -> dict:
    """Validate, check upstream freshness, run one stage and record it."""
    cfg.validate(stage)
    ws = Workspace(cfg.out)
    ws.dir.mkdir(parents=True, exist_ok=True)
    ws.require(stage, cfg)
    collector = _Collector()
    pkg_log = logging.getLogger("crimespat")
    pkg_log.addHandler(collector)
    try:
        summary = STAGE_FUNCS[stage](cfg, ws, **kwargs)
    finally:
        pkg_log.removeHandler(collector)
    if stage == "ingest":
        summary["cbd"] = list(cfg.cbd)
        ws.path("ingest.json").write_text(_dumps(summary))
    if any(v is not None for v in kwargs.values()):
        # filtered runs are ad hoc views and never replace the cached stage
        return summary
    ws.complete(stage, cfg, [p.name for p in ws.dir.iterdir() if p.name != "state.json"], collector.messages, _brief(summary))
    return summary


def _brief(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if not isinstance(v, (list, dict)) or k in ("islands", "excluded_zero_pop")}


def write_manifest(cfg: RunConfig, status: str, error: str | None = None) -> Path:
    ws = Workspace(cfg.out)
    try:
        stages = ws.state()["stages"]
    except (StaleCacheError, OSError, json.JSONDecodeError):
        stages = {}
    completed = [s for s in STAGES if s in stages]
    inputs = {}
    for key in ("crimes", "blockgroups", "parcels", "licenses", "boundary"):
        p = getattr(cfg, key)
        if p and os.path.isfile(p):
            inputs[key] = {"path": p, "sha256": file_hash(p)}
    out = Path(cfg.out)
    outputs = {
        name: file_hash(out / name) for name in OUTPUT_FILES if name != "run_manifest.json" and (out / name).exists()
    }
    manifest = {
        "package": "crimespat",
        "version": __version__,
        "workspace_version": WORKSPACE_VERSION,
        "status": status,
        "error": error,
        "completed_stages": completed,
        "parameters": cfg.as_dict(),
        "seed": cfg.seed,
        "night_windows": {t.value: str(w) for t, w in cfg.windows().items()},
        "input_hashes": inputs,
        "output_hashes": outputs,
        "stage_summaries": {s: stages[s].get("summary", {}) for s in completed},
        "warnings": [m for s in completed for m in stages[s].get("warnings", [])],
        "conventions": CONVENTIONS,
    }
    path = out / "run_manifest.json"
    path.write_text(_dumps(manifest))
    return path


def run_pipeline(cfg: RunConfig) -> Path:
    """Run every stage then the report; on failure write a partial manifest and re-raise."""
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    ws = Workspace(cfg.out)
    if ws.state_path.exists():
        ws.state_path.unlink()
    try:
        for stage in STAGES:
            run_stage(stage, cfg)
    except CrimeSpatError as exc:
        write_manifest(cfg, "failed", f"{type(exc).__name__}: {exc}")
        raise
    return write_manifest(cfg, "ok")
