"""Grid transfer of trained ensembles and exceedance risk maps.

Every hour, each grid cell's feature vector is interpolated at its
representative point and scored by every ensemble member; the raster holds
the median across members. Risk maps count, per cell, the hours whose median
probability strictly exceeds a threshold.
"""

import json
import logging
from dataclasses import dataclass, replace
from datetime import date
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import spearmanr

from src.ciforest import ForestModel, predict_forest_matrix
from src.data_model import FeatureSchema
from src.errors import BadValue, EmptyFile, IoFailure, InvariantViolation, SchemaMismatch, SpecMismatch
from src.geospatial import GridField, GridSpec, TurbineSet, interp_to_points, turbines_per_cell

logger = logging.getLogger(__name__)

COLD_SEASON_MONTHS = (10, 11, 12, 1, 2, 3, 4)
CANONICAL_PERIOD_START = date(2018, 10, 1)
# Inclusive end. The study period closes in December 2020, but ONDJFMA hours up to
# 2020-12-31 only reach 12408; running to 2021-01-03 adds the three days needed for
# the published total of 12480 hours (520 days).
CANONICAL_PERIOD_END = date(2021, 1, 3)

RISKMAP_COLUMNS = ["cell_lat_min", "cell_lon_min", "cell_lat_max", "cell_lon_max",
                   "count", "proportion", "hours_total", "threshold", "no_turbines"]

PathLike = Union[str, Path]


@dataclass(frozen=True)
class EnsembleModel:
    """Forests trained on independent balanced draws; predictions take the median"""

    models: Tuple[ForestModel, ...]

    def __post_init__(self):
        if len(self.models) < 1:
            raise BadValue("an ensemble needs at least one model")
        schema = self.models[0].schema
        if any(m.schema != schema for m in self.models[1:]):
            raise SchemaMismatch("ensemble members must share one feature schema")
        object.__setattr__(self, "models", tuple(self.models))

    @property
    def schema(self) -> FeatureSchema:
        return self.models[0].schema

    def __len__(self) -> int:
        return len(self.models)


def predict_ensemble_matrix(ensemble: EnsembleModel, X) -> np.ndarray:
    """Median over members of each member's forest probability"""
    per_model = np.stack([predict_forest_matrix(m, X) for m in ensemble.models])
    return np.median(per_model, axis=0)


@dataclass(frozen=True, eq=False)
class ProbRaster:
    spec: GridSpec
    time: np.datetime64
    median_prob: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        prob = np.asarray(self.median_prob, dtype=np.float64)
        if prob.shape != self.spec.shape:
            raise InvariantViolation(f"raster shape {prob.shape} does not match grid cells {self.spec.shape}")
        if np.any((prob < 0.0) | (prob > 1.0)) or not np.all(np.isfinite(prob)):
            raise InvariantViolation("raster probabilities must lie in [0, 1]")
        prob.setflags(write=False)
        object.__setattr__(self, "median_prob", prob)
        object.__setattr__(self, "time", np.datetime64(self.time, "h"))
        object.__setattr__(self, "mask", _check_mask(self.mask, self.spec))


@dataclass(frozen=True, eq=False)
class RiskMap:
    spec: GridSpec
    threshold: float
    hours_total: int
    counts: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if self.hours_total < 1:
            raise InvariantViolation("a risk map needs hours_total >= 1")
        if counts.shape != self.spec.shape:
            raise InvariantViolation(f"count shape {counts.shape} does not match grid cells {self.spec.shape}")
        if np.any(counts < 0) or np.any(counts > self.hours_total):
            raise InvariantViolation("exceedance counts must lie in [0, hours_total]")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "mask", _check_mask(self.mask, self.spec))

    @property
    def proportion(self) -> np.ndarray:
        return self.counts / self.hours_total

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RiskMap):
            return NotImplemented
        same_mask = (self.mask is None and other.mask is None) or (
            self.mask is not None and other.mask is not None and np.array_equal(self.mask, other.mask))
        return (self.spec == other.spec and self.threshold == other.threshold
                and self.hours_total == other.hours_total
                and np.array_equal(self.counts, other.counts) and same_mask)

    __hash__ = None


def _check_mask(mask, spec: GridSpec) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != spec.shape:
        raise InvariantViolation(f"mask shape {mask.shape} does not match grid cells {spec.shape}")
    mask.setflags(write=False)
    return mask


def _field_spec(fields: Mapping[str, GridField]) -> GridSpec:
    if not fields:
        raise BadValue("no gridded fields supplied")
    specs = {f.spec for f in fields.values()}
    if len(specs) != 1:
        raise SpecMismatch("gridded fields use different grids")
    return next(iter(specs))


def diagnose_grid_hour(ensemble: EnsembleModel, fields: Mapping[str, GridField], t,
                       representative: str = "center") -> ProbRaster:
    """Median ensemble probability for every cell at hour t"""
    spec = _field_spec(fields)
    lats, lons = spec.representative_points(representative)
    X = interp_to_points(fields, ensemble.schema, lats, lons, t)
    prob = predict_ensemble_matrix(ensemble, X).reshape(spec.shape)
    return ProbRaster(spec=spec, time=np.datetime64(t, "h"), median_prob=prob)


def diagnose_hours(ensemble: EnsembleModel, fields: Mapping[str, GridField], hours: Iterable,
                   representative: str = "center", workers: int = 1) -> List[ProbRaster]:
    """diagnose_grid_hour over an hour list, returned in hour order"""
    hours = sorted(np.datetime64(h, "h") for h in hours)
    if not hours:
        raise BadValue("no hours to diagnose")
    rasters = Parallel(n_jobs=workers)(
        delayed(diagnose_grid_hour)(ensemble, fields, h, representative) for h in hours
    )
    logger.info(f"Diagnosed {len(rasters)} hours with an ensemble of {len(ensemble)} models")
    return rasters


def exceedance_counts(rasters: Sequence[ProbRaster], threshold: float) -> RiskMap:
    """Per cell, hours with median probability strictly above threshold"""
    if not 0.0 < threshold < 1.0:
        raise BadValue(f"threshold {threshold} outside (0, 1)")
    if not rasters:
        raise BadValue("exceedance counting needs at least one raster")
    spec = rasters[0].spec
    if any(r.spec != spec for r in rasters[1:]):
        raise SpecMismatch("rasters use different grids")
    counts = np.zeros(spec.shape, dtype=np.int64)
    for raster in rasters:
        counts += raster.median_prob > threshold
    return RiskMap(spec=spec, threshold=float(threshold), hours_total=len(rasters), counts=counts,
                   mask=rasters[0].mask)


def mask_no_turbine_cells(item: Union[RiskMap, ProbRaster], turbines: TurbineSet,
                          spec: Optional[GridSpec] = None):
    """Flag cells holding no turbine; numeric values stay untouched"""
    spec = spec or item.spec
    if spec != item.spec:
        raise SpecMismatch("mask grid differs from the map grid")
    return replace(item, mask=turbines_per_cell(turbines, spec) == 0)


def cold_season_hours(start: date, end: date, months: Sequence[int] = COLD_SEASON_MONTHS) -> np.ndarray:
    """Every UTC hour of the days in [start, end] whose month is in ``months``"""
    if end < start:
        raise BadValue(f"period end {end} precedes start {start}")
    days = np.arange(np.datetime64(start, "D"), np.datetime64(end, "D") + 1)
    month_of_day = days.astype("datetime64[M]").astype(np.int64) % 12 + 1
    days = days[np.isin(month_of_day, list(months))]
    hours = days.astype("datetime64[h]")[:, None] + np.arange(24).astype("timedelta64[h]")
    return hours.ravel()


def canonical_cold_season_hours() -> np.ndarray:
    return cold_season_hours(CANONICAL_PERIOD_START, CANONICAL_PERIOD_END)


def load_hours(path: PathLike) -> np.ndarray:
    """One ISO hour per line; blank lines and ``#`` comments skipped"""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as e:
        raise IoFailure(f"hour list not found: {path}") from e
    tokens = [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]
    if not tokens:
        raise EmptyFile(f"hour list is empty: {path}")
    stamps = pd.to_datetime(pd.Series(tokens), utc=True, format="ISO8601", errors="coerce")
    if stamps.isna().any():
        bad = tokens[int(np.flatnonzero(stamps.isna())[0])]
        raise BadValue(f"unparsable hour {bad!r} in {path}")
    return np.unique(stamps.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]").astype("datetime64[h]"))


def write_raster(raster: ProbRaster, path: PathLike) -> None:
    spec = raster.spec
    rows, cols = np.indices(spec.shape)
    frame = pd.DataFrame({
        "time": str(np.datetime_as_string(raster.time, unit="h")) + ":00Z",
        "cell_lat_min": [repr(v) for v in spec.cell_lat_min()[rows.ravel()].tolist()],
        "cell_lon_min": [repr(v) for v in spec.cell_lon_min()[cols.ravel()].tolist()],
        "median_prob": [repr(v) for v in raster.median_prob.ravel().tolist()],
    })
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write raster {path}: {e}") from e


class RiskMapExporter:
    """Serializers for risk maps, selected by format name"""

    @staticmethod
    def export(risk_map: RiskMap, fmt: str) -> str:
        fmt = fmt.lower()
        if fmt == "csv":
            return RiskMapExporter._to_csv(risk_map)
        elif fmt == "geojson":
            return RiskMapExporter._to_geojson(risk_map)
        else:
            raise BadValue(f"Unsupported risk map format: {fmt}")

    @staticmethod
    def _cells(risk_map: RiskMap):
        spec = risk_map.spec
        lat_min = spec.cell_lat_min()
        lon_min = spec.cell_lon_min()
        proportion = risk_map.proportion
        for r in range(spec.n_rows):
            for c in range(spec.n_cols):
                no_turbines = None if risk_map.mask is None else bool(risk_map.mask[r, c])
                yield (r, c, float(lat_min[r]), float(lon_min[c]),
                       float(lat_min[r] + spec.step), float(lon_min[c] + spec.step),
                       int(risk_map.counts[r, c]), float(proportion[r, c]), no_turbines)

    @staticmethod
    def _to_csv(risk_map: RiskMap) -> str:
        flag = {None: "", True: "1", False: "0"}
        frame = pd.DataFrame(
            [[repr(la0), repr(lo0), repr(la1), repr(lo1), count, repr(prop), risk_map.hours_total,
              repr(risk_map.threshold), flag[masked]]
             for _, _, la0, lo0, la1, lo1, count, prop, masked in RiskMapExporter._cells(risk_map)],
            columns=RISKMAP_COLUMNS,
        )
        return frame.to_csv(index=False, lineterminator="\n")

    @staticmethod
    def _to_geojson(risk_map: RiskMap) -> str:
        features = []
        for r, c, la0, lo0, la1, lo1, count, prop, masked in RiskMapExporter._cells(risk_map):
            features.append({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[lo0, la0], [lo1, la0], [lo1, la1], [lo0, la1], [lo0, la0]]],
                },
                "properties": {
                    "row": r, "col": c, "cell_lat_min": la0, "cell_lon_min": lo0,
                    "count": count, "proportion": prop, "no_turbines": masked,
                },
            })
        doc = {
            "type": "FeatureCollection",
            "threshold": risk_map.threshold,
            "hours_total": risk_map.hours_total,
            "features": features,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def export_riskmap(risk_map: RiskMap, fmt: str = "csv", path: Optional[PathLike] = None) -> str:
    """Serialize a risk map as CSV or GeoJSON, writing it to ``path`` when given"""
    document = RiskMapExporter.export(risk_map, fmt)
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(document)
        except OSError as e:
            raise IoFailure(f"cannot write risk map {path}: {e}") from e
    return document


def read_riskmap_csv(path: PathLike) -> RiskMap:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise IoFailure(f"risk map not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise EmptyFile(f"risk map is empty: {path}") from e
    if list(frame.columns) != RISKMAP_COLUMNS:
        raise SchemaMismatch(f"{path} is not a risk map CSV")
    if frame.empty:
        raise EmptyFile(f"risk map has no cells: {path}")

    lat0 = frame["cell_lat_min"].astype(float).to_numpy()
    lon0 = frame["cell_lon_min"].astype(float).to_numpy()
    step = round(float(frame["cell_lat_max"].astype(float).iloc[0] - lat0[0]), 12)
    spec = GridSpec(lat_min=float(lat0.min()), lat_max=float(frame["cell_lat_max"].astype(float).max()),
                    lon_min=float(lon0.min()), lon_max=float(frame["cell_lon_max"].astype(float).max()),
                    step=step)
    if len(frame) != spec.n_rows * spec.n_cols:
        raise BadValue(f"{path} holds {len(frame)} cells, grid implies {spec.n_rows * spec.n_cols}")
    rows = np.rint((lat0 - spec.lat_min) / spec.step).astype(np.intp)
    cols = np.rint((lon0 - spec.lon_min) / spec.step).astype(np.intp)
    counts = np.zeros(spec.shape, dtype=np.int64)
    counts[rows, cols] = frame["count"].astype(np.int64).to_numpy()

    flags = frame["no_turbines"]
    mask = None
    if (flags != "").all():
        mask = np.zeros(spec.shape, dtype=bool)
        mask[rows, cols] = flags.to_numpy() == "1"
    return RiskMap(spec=spec, threshold=float(frame["threshold"].iloc[0]),
                   hours_total=int(frame["hours_total"].iloc[0]), counts=counts, mask=mask)


def summarize(risk_map: RiskMap) -> str:
    """Plain-text summary: totals, hottest cell, domain mean proportion"""
    spec = risk_map.spec
    r, c = np.unravel_index(int(np.argmax(risk_map.counts)), spec.shape)
    lines = [
        f"threshold: {risk_map.threshold}",
        f"hours_total: {risk_map.hours_total}",
        f"cells: {spec.n_rows * spec.n_cols} ({spec.n_rows} x {spec.n_cols})",
        f"max_count: {int(risk_map.counts[r, c])} at cell_lat_min={float(spec.cell_lat_min()[r])!r} "
        f"cell_lon_min={float(spec.cell_lon_min()[c])!r}",
        f"mean_proportion: {float(np.mean(risk_map.proportion))!r}",
    ]
    if risk_map.mask is not None:
        lines.append(f"cells_without_turbines: {int(risk_map.mask.sum())}")
    return "\n".join(lines) + "\n"


def compare_with_observed(risk_map: RiskMap, flash_hours: np.ndarray) -> float:
    """Spearman rank correlation between exceedance counts and observed flash hours per cell"""
    flash_hours = np.asarray(flash_hours)
    if flash_hours.shape != risk_map.spec.shape:
        raise SpecMismatch(f"flash-hour grid {flash_hours.shape} does not match {risk_map.spec.shape}")
    a, b = risk_map.counts.ravel(), flash_hours.ravel()
    if np.all(a == a[0]) or np.all(b == b[0]):
        logger.warning("Constant counts or flash hours; rank correlation undefined")
        return float("nan")
    rho, _ = spearmanr(a, b)
    return float(rho)
