"""Gridded fields, point interpolation and strike-to-turbine matching.

Grid nodes sit at ``lat_min + i * step`` and ``lon_min + j * step``; cells are
the squares between neighbouring nodes, so the canonical 50-54N / 6-16E
domain at 0.25 degrees has 17 x 41 nodes and 16 x 40 cells. Node arrays are
lat-major: ``values[t, i, j]``.
"""

import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial import cKDTree
from sklearn.neighbors import BallTree

from src.data_model import FeatureSchema
from src.errors import (BadValue, EmptyFile, IoFailure, LengthMismatch, MissingVariable, OutOfDomain,
                        OutOfTimeRange, SchemaMismatch)

logger = logging.getLogger(__name__)

DEFAULT_RADIUS_DEG = 0.003
EARTH_RADIUS_M = 6_371_008.8
# Distances within this slack of the radius count as on the boundary (inclusive).
BOUNDARY_TOLERANCE_DEG = 1e-12
# Slack, in index units, when snapping coordinates to grid lines.
_INDEX_TOLERANCE = 1e-9

PathLike = Union[str, Path]


class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    lat_min: float = 50.0
    lat_max: float = 54.0
    lon_min: float = 6.0
    lon_max: float = 16.0
    step: float = 0.25

    @model_validator(mode="after")
    def _aligned(self) -> "GridSpec":
        if self.step <= 0:
            raise ValueError("step must be > 0")
        for low, high, axis in ((self.lat_min, self.lat_max, "lat"), (self.lon_min, self.lon_max, "lon")):
            cells = (high - low) / self.step
            if cells < 1 or abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"{axis} extent must be a positive multiple of step")
        return self

    @property
    def n_rows(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.step))

    @property
    def n_cols(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.step))

    @property
    def n_lat_nodes(self) -> int:
        return self.n_rows + 1

    @property
    def n_lon_nodes(self) -> int:
        return self.n_cols + 1

    @property
    def shape(self) -> Tuple[int, int]:
        """Cell-array shape (rows, cols)"""
        return self.n_rows, self.n_cols

    def node_lats(self) -> np.ndarray:
        return self.lat_min + self.step * np.arange(self.n_lat_nodes)

    def node_lons(self) -> np.ndarray:
        return self.lon_min + self.step * np.arange(self.n_lon_nodes)

    def cell_lat_min(self) -> np.ndarray:
        return self.lat_min + self.step * np.arange(self.n_rows)

    def cell_lon_min(self) -> np.ndarray:
        return self.lon_min + self.step * np.arange(self.n_cols)

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        return (self.lat_min + (row + 0.5) * self.step, self.lon_min + (col + 0.5) * self.step)

    def representative_points(self, mode: str = "center") -> Tuple[np.ndarray, np.ndarray]:
        """Flattened (row-major) lat/lon of each cell's representative point"""
        offset = {"center": 0.5, "lower_left": 0.0}.get(mode)
        if offset is None:
            raise BadValue(f"unknown representative point {mode!r}; use 'center' or 'lower_left'")
        lats = self.lat_min + (np.arange(self.n_rows) + offset) * self.step
        lons = self.lon_min + (np.arange(self.n_cols) + offset) * self.step
        grid_lat, grid_lon = np.meshgrid(lats, lons, indexing="ij")
        return grid_lat.ravel(), grid_lon.ravel()

    def contains(self, lat, lon) -> np.ndarray:
        lat, lon = np.asarray(lat), np.asarray(lon)
        return ((lat >= self.lat_min) & (lat <= self.lat_max)
                & (lon >= self.lon_min) & (lon <= self.lon_max))


@dataclass(frozen=True)
class GridField:
    """Hourly node values of one schema variable"""

    spec: GridSpec
    variable: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        given = np.asarray(self.times)
        if given.size == 0:
            given = np.array([], dtype="datetime64[h]")
        elif given.dtype.kind != "M":
            given = np.array(given.tolist(), dtype="datetime64")
        times = given.astype("datetime64[h]")
        if np.any(times != given):
            raise BadValue(f"{self.variable}: times must fall on whole hours")
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(times), self.spec.n_lat_nodes, self.spec.n_lon_nodes):
            raise LengthMismatch(f"{self.variable}: values shape {values.shape} does not match "
                                 f"{len(times)} times x {self.spec.n_lat_nodes} x {self.spec.n_lon_nodes} nodes")
        if len(times) == 0 or np.any(np.diff(times).astype(np.int64) <= 0):
            raise BadValue(f"{self.variable}: times must be non-empty and strictly increasing")
        if np.any(np.diff(times).astype(np.int64) != 1):
            raise BadValue(f"{self.variable}: times must be consecutive hours")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class TurbineSet:
    ids: Tuple[str, ...]
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        if not (len(self.ids) == len(lat) == len(lon)):
            raise LengthMismatch("turbine ids and coordinates differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise BadValue("turbine ids must be unique")
        if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
            raise BadValue("turbine coordinates must be finite")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class StrikeEvent:
    timestamp: np.datetime64
    lat: float
    lon: float


@dataclass(frozen=True)
class MatchedEvent:
    strike: StrikeEvent
    turbine_id: str
    distance_deg: float
    distance_m: Optional[float] = None


def _as_minutes(t) -> np.datetime64:
    if isinstance(t, datetime) and t.tzinfo is not None:
        t = pd.Timestamp(t).tz_convert(None)
    return np.datetime64(pd.Timestamp(t).to_datetime64(), "m")


def _fractional_index(value: np.ndarray, low: float, step: float, n_cells: int) -> Tuple[np.ndarray, np.ndarray]:
    pos = (value - low) / step
    base = np.clip(np.floor(pos + _INDEX_TOLERANCE), 0, n_cells - 1).astype(np.intp)
    frac = np.clip(pos - base, 0.0, 1.0)
    return base, frac


def bilinear_interp_many(values2d: np.ndarray, spec: GridSpec, lats, lons) -> np.ndarray:
    """Bilinear interpolation of a node array at many points"""
    lats = np.atleast_1d(np.asarray(lats, dtype=np.float64))
    lons = np.atleast_1d(np.asarray(lons, dtype=np.float64))
    if not np.all(spec.contains(lats, lons)):
        bad = int(np.flatnonzero(~spec.contains(lats, lons))[0])
        raise OutOfDomain(f"point ({lats[bad]}, {lons[bad]}) lies outside the grid")
    values2d = np.asarray(values2d, dtype=np.float64)
    if values2d.shape != (spec.n_lat_nodes, spec.n_lon_nodes):
        raise LengthMismatch(f"node array shape {values2d.shape} does not match spec")
    i, t = _fractional_index(lats, spec.lat_min, spec.step, spec.n_rows)
    j, u = _fractional_index(lons, spec.lon_min, spec.step, spec.n_cols)
    return ((1 - t) * (1 - u) * values2d[i, j] + (1 - t) * u * values2d[i, j + 1]
            + t * (1 - u) * values2d[i + 1, j] + t * u * values2d[i + 1, j + 1])


def bilinear_interp(values2d: np.ndarray, spec: GridSpec, lat: float, lon: float) -> float:
    """Bilinear combination of the four nodes surrounding (lat, lon)"""
    return float(bilinear_interp_many(values2d, spec, [lat], [lon])[0])


def _time_weights(field: GridField, t: np.datetime64) -> Tuple[int, int, float]:
    times = field.times.astype("datetime64[m]")
    if t < times[0] or t > times[-1]:
        raise OutOfTimeRange(f"{t} outside {field.variable} times [{times[0]}, {times[-1]}]")
    k = int(np.searchsorted(times, t, side="right")) - 1
    if times[k] == t:
        return k, k, 0.0
    span = (times[k + 1] - times[k]).astype(np.int64)
    return k, k + 1, float((t - times[k]).astype(np.int64) / span)


def interp_field_to_points(field: GridField, lats, lons, t) -> np.ndarray:
    """Bilinear in space at the bracketing hours, then linear in time"""
    t = _as_minutes(t)
    k0, k1, w = _time_weights(field, t)
    before = bilinear_interp_many(field.values[k0], field.spec, lats, lons)
    if w == 0.0:
        return before
    after = bilinear_interp_many(field.values[k1], field.spec, lats, lons)
    return (1 - w) * before + w * after


def interp_to_points(fields: Mapping[str, GridField], schema: FeatureSchema, lats, lons, t) -> np.ndarray:
    """Feature matrix (points x schema variables) at instant t"""
    columns = []
    for name in schema.names:
        field = fields.get(name)
        if field is None:
            raise MissingVariable(f"no gridded field for variable {name}", variable=name)
        columns.append(interp_field_to_points(field, lats, lons, t))
    return np.column_stack(columns)


def interp_to_point(fields: Mapping[str, GridField], schema: FeatureSchema, lat: float, lon: float, t) -> np.ndarray:
    """Feature vector in schema order at one location and instant"""
    return interp_to_points(fields, schema, [lat], [lon], t)[0]


def cells_of(lats, lons, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized cell_of"""
    lats = np.atleast_1d(np.asarray(lats, dtype=np.float64))
    lons = np.atleast_1d(np.asarray(lons, dtype=np.float64))
    inside = spec.contains(lats, lons)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise OutOfDomain(f"point ({lats[bad]}, {lons[bad]}) lies outside the grid")
    rows, _ = _fractional_index(lats, spec.lat_min, spec.step, spec.n_rows)
    cols, _ = _fractional_index(lons, spec.lon_min, spec.step, spec.n_cols)
    return rows, cols


def cell_of(lat: float, lon: float, spec: GridSpec) -> Tuple[int, int]:
    """Cell containing a point; interior edges belong to the higher-index cell,
    the domain's upper edges to the last cell"""
    rows, cols = cells_of([lat], [lon], spec)
    return int(rows[0]), int(cols[0])


def match_strikes_to_turbines(strikes: Sequence[StrikeEvent], turbines: TurbineSet,
                              radius_deg: float = DEFAULT_RADIUS_DEG, great_circle: bool = False,
                              radius_m: Optional[float] = None) -> List[MatchedEvent]:
    """All (strike, turbine) pairs within the radius, inclusive of the boundary.

    Default distance is Euclidean in degree space. With ``great_circle`` the
    haversine distance in metres is compared against ``radius_m``.
    Output order: strike order, then turbine id.
    """
    if radius_deg <= 0 or (radius_m is not None and radius_m <= 0):
        raise BadValue("match radius must be > 0")
    if not strikes or len(turbines) == 0:
        return []
    points = np.array([[s.lat, s.lon] for s in strikes], dtype=np.float64)
    sites = np.column_stack([turbines.lat, turbines.lon])

    if great_circle:
        radius_m = radius_m if radius_m is not None else radius_deg * math.pi / 180 * EARTH_RADIUS_M
        tree = BallTree(np.radians(sites), metric="haversine")
        candidates, _ = tree.query_radius(np.radians(points), r=radius_m / EARTH_RADIUS_M * (1 + 1e-9),
                                          return_distance=True)
    else:
        tree = cKDTree(sites)
        candidates = tree.query_ball_point(points, r=radius_deg + BOUNDARY_TOLERANCE_DEG)

    matches = []
    for s_idx, found in enumerate(candidates):
        found = np.asarray(found, dtype=np.intp)
        if found.size == 0:
            continue
        d_deg = np.hypot(sites[found, 0] - points[s_idx, 0], sites[found, 1] - points[s_idx, 1])
        if great_circle:
            d_m = _haversine_m(points[s_idx], sites[found])
            keep = d_m <= radius_m * (1 + 1e-12)
        else:
            d_m = None
            keep = d_deg <= radius_deg + BOUNDARY_TOLERANCE_DEG
        hits = sorted((turbines.ids[t], i) for i, t in enumerate(found) if keep[i])
        for turbine_id, i in hits:
            matches.append(MatchedEvent(strike=strikes[s_idx], turbine_id=turbine_id,
                                        distance_deg=float(d_deg[i]),
                                        distance_m=None if d_m is None else float(d_m[i])))
    logger.info(f"Matched {len(matches)} strike/turbine pairs from {len(strikes)} strikes")
    return matches


def _haversine_m(point: np.ndarray, sites: np.ndarray) -> np.ndarray:
    lat1, lon1 = np.radians(point)
    lat2, lon2 = np.radians(sites[:, 0]), np.radians(sites[:, 1])
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def flash_hours_per_cell(matches: Iterable[MatchedEvent], spec: GridSpec) -> np.ndarray:
    """Per cell, the number of distinct UTC hours with at least one matched strike"""
    matches = list(matches)
    counts = np.zeros(spec.shape, dtype=np.int64)
    if not matches:
        return counts
    lats = np.array([m.strike.lat for m in matches])
    lons = np.array([m.strike.lon for m in matches])
    hours = np.array([np.datetime64(m.strike.timestamp, "h") for m in matches]).astype(np.int64)
    inside = spec.contains(lats, lons)
    if not inside.all():
        logger.warning(f"Ignoring {int((~inside).sum())} matches outside the grid domain")
    if not inside.any():
        return counts
    rows, cols = cells_of(lats[inside], lons[inside], spec)
    distinct = np.unique(np.column_stack([rows, cols, hours[inside]]), axis=0)
    np.add.at(counts, (distinct[:, 0], distinct[:, 1]), 1)
    return counts


def turbines_per_cell(turbines: TurbineSet, spec: GridSpec) -> np.ndarray:
    counts = np.zeros(spec.shape, dtype=np.int64)
    inside = spec.contains(turbines.lat, turbines.lon)
    if inside.any():
        rows, cols = cells_of(turbines.lat[inside], turbines.lon[inside], spec)
        np.add.at(counts, (rows, cols), 1)
    return counts


def load_turbines(path: PathLike) -> TurbineSet:
    frame = _read_csv(path, ["id", "lat", "lon"], {"id": str})
    lat = pd.to_numeric(frame["lat"], errors="coerce").to_numpy(dtype=np.float64)
    lon = pd.to_numeric(frame["lon"], errors="coerce").to_numpy(dtype=np.float64)
    return TurbineSet(ids=tuple(frame["id"].astype(str)), lat=lat, lon=lon)


def load_strikes(path: PathLike) -> List[StrikeEvent]:
    frame = _read_csv(path, ["timestamp", "lat", "lon"], {"timestamp": str})
    stamps = pd.to_datetime(frame["timestamp"], utc=True, format="ISO8601", errors="coerce")
    if stamps.isna().any():
        raise BadValue(f"unparsable strike timestamp in {path}")
    minutes = stamps.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]").astype("datetime64[m]")
    lat = pd.to_numeric(frame["lat"], errors="coerce").to_numpy(dtype=np.float64)
    lon = pd.to_numeric(frame["lon"], errors="coerce").to_numpy(dtype=np.float64)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise BadValue(f"non-finite strike coordinates in {path}")
    return [StrikeEvent(timestamp=t, lat=float(a), lon=float(o)) for t, a, o in zip(minutes, lat, lon)]


def _fmt_minute(t: np.datetime64) -> str:
    return str(np.datetime_as_string(np.datetime64(t, "m"), unit="m")) + "Z"


def write_turbines(turbines: TurbineSet, path: PathLike) -> None:
    _write_frame(pd.DataFrame({
        "id": list(turbines.ids),
        "lat": [repr(v) for v in turbines.lat.tolist()],
        "lon": [repr(v) for v in turbines.lon.tolist()],
    }), path)


def write_strikes(strikes: Sequence[StrikeEvent], path: PathLike) -> None:
    _write_frame(pd.DataFrame({
        "timestamp": [_fmt_minute(s.timestamp) for s in strikes],
        "lat": [repr(float(s.lat)) for s in strikes],
        "lon": [repr(float(s.lon)) for s in strikes],
    }, columns=["timestamp", "lat", "lon"]), path)


def write_matches(matches: Sequence[MatchedEvent], path: PathLike) -> None:
    _write_frame(pd.DataFrame({
        "strike_timestamp": [_fmt_minute(m.strike.timestamp) for m in matches],
        "strike_lat": [repr(float(m.strike.lat)) for m in matches],
        "strike_lon": [repr(float(m.strike.lon)) for m in matches],
        "turbine_id": [m.turbine_id for m in matches],
        "distance_deg": [repr(m.distance_deg) for m in matches],
    }, columns=["strike_timestamp", "strike_lat", "strike_lon", "turbine_id", "distance_deg"]), path)


def write_cell_counts(counts: np.ndarray, spec: GridSpec, path: PathLike, column: str = "count") -> None:
    rows, cols = np.indices(spec.shape)
    _write_frame(pd.DataFrame({
        "row": rows.ravel(),
        "col": cols.ravel(),
        "cell_lat_min": [repr(v) for v in spec.cell_lat_min()[rows.ravel()].tolist()],
        "cell_lon_min": [repr(v) for v in spec.cell_lon_min()[cols.ravel()].tolist()],
        column: np.asarray(counts).ravel(),
    }), path)


def load_grid_fields(directory: PathLike, spec: Optional[GridSpec] = None) -> Dict[str, GridField]:
    """Load every ``<variable>.csv`` (time,lat,lon,value) or ``<variable>.bin`` + ``.json`` in a directory"""
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailure(f"grid directory not found: {directory}")
    fields: Dict[str, GridField] = {}
    for sidecar in sorted(directory.glob("*.json")):
        field = _load_binary_field(sidecar)
        fields[field.variable] = field
    for path in sorted(directory.glob("*.csv")):
        if path.stem not in fields:
            fields[path.stem] = _load_long_csv(path, path.stem, spec)
    if not fields:
        raise EmptyFile(f"no gridded fields in {directory}")
    specs = {f.spec for f in fields.values()}
    if len(specs) != 1:
        raise SchemaMismatch(f"gridded fields in {directory} use different grids")
    logger.info(f"Loaded {len(fields)} gridded fields from {directory}")
    return fields


def _load_long_csv(path: Path, variable: str, spec: Optional[GridSpec]) -> GridField:
    frame = _read_csv(path, ["time", "lat", "lon", "value"], {"time": str})
    stamps = pd.to_datetime(frame["time"], utc=True, format="ISO8601", errors="coerce")
    if stamps.isna().any():
        raise BadValue(f"unparsable time in {path}")
    instants = stamps.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]")
    hours = instants.astype("datetime64[h]")
    if np.any(hours != instants):
        raise BadValue(f"times in {path} must fall on whole hours")
    lat = pd.to_numeric(frame["lat"], errors="coerce").to_numpy(dtype=np.float64)
    lon = pd.to_numeric(frame["lon"], errors="coerce").to_numpy(dtype=np.float64)
    value = pd.to_numeric(frame["value"], errors="coerce").to_numpy(dtype=np.float64)
    if not (np.isfinite(lat).all() and np.isfinite(lon).all() and np.isfinite(value).all()):
        raise BadValue(f"non-finite coordinate or value in {path}")
    spec = spec or _infer_spec(lat, lon, path)

    times = np.unique(hours)
    i = np.rint((lat - spec.lat_min) / spec.step).astype(np.intp)
    j = np.rint((lon - spec.lon_min) / spec.step).astype(np.intp)
    k = np.searchsorted(times, hours)
    if (i.min() < 0 or j.min() < 0 or i.max() >= spec.n_lat_nodes or j.max() >= spec.n_lon_nodes):
        raise BadValue(f"{path} has nodes outside the grid")
    values = np.full((len(times), spec.n_lat_nodes, spec.n_lon_nodes), np.nan)
    values[k, i, j] = value
    if np.isnan(values).any() or len(frame) != values.size:
        raise BadValue(f"{path} does not cover every node and hour exactly once")
    return GridField(spec=spec, variable=variable, times=times, values=values)


def _infer_spec(lat: np.ndarray, lon: np.ndarray, path: Path) -> GridSpec:
    lats, lons = np.unique(lat), np.unique(lon)
    steps = np.concatenate([np.diff(lats), np.diff(lons)])
    if steps.size == 0:
        raise BadValue(f"cannot infer grid spacing from {path}")
    step = float(np.round(steps.min(), 9))
    try:
        return GridSpec(lat_min=float(lats[0]), lat_max=float(lats[-1]),
                        lon_min=float(lons[0]), lon_max=float(lons[-1]), step=step)
    except ValueError as e:
        raise BadValue(f"irregular grid in {path}: {e}") from e


def _load_binary_field(sidecar: Path) -> GridField:
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        raw = np.fromfile(sidecar.with_suffix(".bin"), dtype=np.dtype(meta.get("dtype", "<f8")))
    except FileNotFoundError as e:
        raise IoFailure(f"missing binary payload for {sidecar}") from e
    except (json.JSONDecodeError, TypeError, AttributeError) as e:
        raise BadValue(f"corrupt sidecar {sidecar}: {e}") from e
    try:
        spec = GridSpec(**meta["spec"])
        variable = meta["variable"]
        stamps = pd.to_datetime(pd.Series(meta["times"], dtype=object), utc=True, format="ISO8601")
    except KeyError as e:
        raise BadValue(f"sidecar {sidecar} lacks the {e.args[0]!r} entry") from e
    except (TypeError, ValueError) as e:
        raise BadValue(f"corrupt sidecar {sidecar}: {e}") from e
    times = stamps.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]")
    shape = (len(times), spec.n_lat_nodes, spec.n_lon_nodes)
    if raw.size != int(np.prod(shape)):
        raise BadValue(f"{sidecar.with_suffix('.bin')} holds {raw.size} values, expected {shape}")
    return GridField(spec=spec, variable=variable, times=times, values=raw.reshape(shape))


def save_grid_fields(fields: Mapping[str, GridField], directory: PathLike, fmt: str = "csv") -> Path:
    """Write fields in the long CSV layout or as little-endian binary with JSON sidecars"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name in sorted(fields):
            field = fields[name]
            time_labels = [str(s) + ":00Z" for s in np.datetime_as_string(field.times, unit="h")]
            if fmt == "binary":
                field.values.astype("<f8").tofile(directory / f"{name}.bin")
                meta = {"variable": name, "spec": field.spec.model_dump(), "times": time_labels,
                        "dtype": "<f8", "shape": list(field.values.shape)}
                (directory / f"{name}.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
            elif fmt == "csv":
                t_idx, i_idx, j_idx = np.indices(field.values.shape)
                frame = pd.DataFrame({
                    "time": np.array(time_labels, dtype=object)[t_idx.ravel()],
                    "lat": [repr(v) for v in field.spec.node_lats()[i_idx.ravel()].tolist()],
                    "lon": [repr(v) for v in field.spec.node_lons()[j_idx.ravel()].tolist()],
                    "value": [repr(v) for v in field.values.ravel().tolist()],
                })
                frame.to_csv(directory / f"{name}.csv", index=False, lineterminator="\n")
            else:
                raise BadValue(f"unknown grid format {fmt!r}; use 'csv' or 'binary'")
    except OSError as e:
        raise IoFailure(f"cannot write gridded fields to {directory}: {e}") from e
    return directory


def _read_csv(path: PathLike, columns: List[str], dtypes: Dict[str, type]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=dtypes, keep_default_na=False)
    except FileNotFoundError as e:
        raise IoFailure(f"file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise EmptyFile(f"file is empty: {path}") from e
    if list(frame.columns) != columns:
        raise SchemaMismatch(f"{path} header must be {','.join(columns)}, got {','.join(frame.columns)}")
    return frame


def _write_frame(frame: pd.DataFrame, path: PathLike) -> None:
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
