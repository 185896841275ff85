"""Synthetic ground truth for end-to-end checks.

Labels follow a known logistic model, P(UL | x) = sigmoid(w . x + b), over the
canonical 35-variable layout. Variables with a nonzero weight carry the signal;
on the grid they follow a spatial pattern plus a bounded diurnal term, the
rest are smooth random fields. A logistic truth is deliberately outside the
forest's hypothesis class.
"""

import logging
from dataclasses import dataclass
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.special import expit

from src.data_model import (CANONICAL_COUNT, Dataset, FeatureSchema, Source, UlSubtype, canonical_schema,
                            save_feature_table)
from src.errors import BadValue, IoFailure, LengthMismatch
from src.geospatial import (GridField, GridSpec, StrikeEvent, TurbineSet, interp_to_points, save_grid_fields,
                            write_strikes, write_turbines)
from src.rng import substream

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# substream keys per generated artifact
_EVENT_DAYS, _TOWER, _POOL, _GRID, _TURBINES, _SUBTYPE = 1, 2, 3, 4, 5, 6


class SpatialPattern(str, Enum):
    UNIFORM = "uniform"
    WEST_GRADIENT = "west-gradient"
    FRONTAL_BAND = "frontal-band"


def _default_coefficients() -> Tuple[float, ...]:
    return (3.0, -3.0, 2.0) + (0.0,) * (CANONICAL_COUNT - 3)


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    coefficients: Tuple[float, ...] = _default_coefficients()
    intercept: float = 0.0
    n_event_days: int = 20
    ul_rows_per_event_day: int = 5
    pool_size: int = 2000
    seed: int = 0
    spatial_pattern: SpatialPattern = SpatialPattern.WEST_GRADIENT

    period_start: date = date(2018, 1, 1)
    period_days: int = 1096
    tower_lat: float = 52.0
    tower_lon: float = 11.0
    # share of tower UL rows the lightning location system detects
    lls_fraction: float = 0.7

    # grid scenario
    pattern_strength: float = 1.5
    gradient_steepness: float = 3.0
    band_width: float = 0.75
    band_slope: float = 0.2
    temporal_amplitude: float = 0.3
    band_margin: float = 0.1
    uniform_epsilon: float = 1e-9

    n_turbines: int = 200
    strike_rate: float = 0.05

    @field_validator("coefficients")
    @classmethod
    def _some_signal(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not any(v != 0.0 for v in value):
            raise ValueError("at least one coefficient must be nonzero")
        return value

    @field_validator("n_event_days", "ul_rows_per_event_day", "pool_size", "period_days")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("lls_fraction")
    @classmethod
    def _fraction(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("lls_fraction must lie in [0, 1]")
        return value

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.coefficients, dtype=np.float64)

    def signal_variables(self) -> np.ndarray:
        return np.flatnonzero(self.weights != 0.0)


@dataclass(frozen=True)
class GridTruth:
    """Generated fields plus the true probability of every cell and hour"""

    fields: Dict[str, GridField]
    hours: np.ndarray
    prob: np.ndarray
    pattern: np.ndarray


def _check_schema(config: SynthConfig, schema: FeatureSchema) -> None:
    if len(config.coefficients) != schema.count:
        raise LengthMismatch(f"{len(config.coefficients)} coefficients for {schema.count} schema variables")


def true_probability(config: SynthConfig, X: np.ndarray) -> np.ndarray:
    return expit(np.asarray(X, dtype=np.float64) @ config.weights + config.intercept)


def draw_labeled_situations(config: SynthConfig, n: int,
                            rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """n iid situations: features, Bernoulli labels, true probabilities"""
    rng = rng if rng is not None else substream(config.seed, _TOWER)
    X = rng.standard_normal((n, len(config.coefficients)))
    p = true_probability(config, X)
    y = (rng.random(n) < p).astype(np.int8)
    return X, y, p


def _event_days(config: SynthConfig) -> np.ndarray:
    if config.n_event_days > config.period_days:
        raise BadValue(f"{config.n_event_days} event days do not fit into {config.period_days} days")
    rng = substream(config.seed, _EVENT_DAYS)
    offsets = np.sort(rng.choice(config.period_days, size=config.n_event_days, replace=False))
    return np.datetime64(config.period_start, "D") + offsets


def synthetic_event_days(config: SynthConfig) -> np.ndarray:
    return _event_days(config)


def generate_tower_dataset(config: SynthConfig,
                           schema: Optional[FeatureSchema] = None) -> Tuple[Dataset, np.ndarray]:
    """Minute-stamped tower situations on ``n_event_days`` days.

    Each event day keeps drawing situations until ``ul_rows_per_event_day`` of
    them come out UL; every draw of the day is kept. Returns the dataset and
    the true probability of each row.
    """
    schema = schema or canonical_schema()
    _check_schema(config, schema)
    if config.n_event_days < 2:
        raise BadValue("a tower dataset needs at least 2 event days")
    rng = substream(config.seed, _TOWER)
    k = config.ul_rows_per_event_day
    batch = max(4 * k, 16)

    X_parts, y_parts, p_parts, t_parts = [], [], [], []
    for day in _event_days(config):
        X_day, y_day, p_day = [], [], []
        found = 0
        while found < k:
            X, y, p = draw_labeled_situations(config, batch, rng)
            hits = np.cumsum(y)
            if hits[-1] + found >= k:
                stop = int(np.searchsorted(hits, k - found)) + 1
                X, y, p = X[:stop], y[:stop], p[:stop]
            found += int(y.sum())
            X_day.append(X)
            y_day.append(y)
            p_day.append(p)
        n_day = sum(len(y) for y in y_day)
        minutes = np.sort(rng.choice(24 * 60, size=n_day, replace=True))
        t_parts.append(day.astype("datetime64[m]") + minutes.astype("timedelta64[m]"))
        X_parts.extend(X_day)
        y_parts.extend(y_day)
        p_parts.extend(p_day)

    y_all = np.concatenate(y_parts)
    n = len(y_all)
    detected = substream(config.seed, _SUBTYPE).random(n) < config.lls_fraction
    subtype = np.where(y_all == 1, np.where(detected, UlSubtype.LLS.value, UlSubtype.NO_LLS.value), "")
    dataset = Dataset(
        schema,
        X=np.concatenate(X_parts),
        y=y_all,
        timestamps=np.concatenate(t_parts),
        lat=np.full(n, config.tower_lat),
        lon=np.full(n, config.tower_lon),
        source=np.full(n, Source.SYNTHETIC.value, dtype=object),
        ul_subtype=subtype.astype(object),
    )
    logger.info(f"Generated tower dataset: {n} rows, {dataset.n_positive} UL, {config.n_event_days} event days")
    return dataset, np.concatenate(p_parts)


def generate_negative_pool(config: SynthConfig, schema: Optional[FeatureSchema] = None) -> Dataset:
    """No-UL situations at whole hours on non-event days, spread over all seasons"""
    schema = schema or canonical_schema()
    _check_schema(config, schema)
    rng = substream(config.seed, _POOL)
    event = _event_days(config)
    all_days = np.datetime64(config.period_start, "D") + np.arange(config.period_days)
    free_days = all_days[~np.isin(all_days, event)]
    if free_days.size == 0:
        raise BadValue("no non-event days left for the negative pool")

    kept = []
    remaining = config.pool_size
    while remaining > 0:
        X, y, _ = draw_labeled_situations(config, max(2 * remaining, 64), rng)
        X = X[y == 0][:remaining]
        kept.append(X)
        remaining -= len(X)
    X = np.concatenate(kept)
    n = len(X)
    days = free_days[rng.integers(0, free_days.size, size=n)]
    hours = rng.integers(0, 24, size=n)
    timestamps = days.astype("datetime64[m]") + (hours * 60).astype("timedelta64[m]")
    order = np.argsort(timestamps, kind="stable")
    return Dataset(
        schema,
        X=X[order],
        y=np.zeros(n, dtype=np.int8),
        timestamps=timestamps[order],
        lat=np.full(n, config.tower_lat),
        lon=np.full(n, config.tower_lon),
        source=np.full(n, Source.SYNTHETIC.value, dtype=object),
    )


def _pattern(config: SynthConfig, lat: np.ndarray, lon: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Spatial signal in [-1, 1]; +1 favours UL"""
    lat_mid = (spec.lat_min + spec.lat_max) / 2
    lon_mid = (spec.lon_min + spec.lon_max) / 2
    if config.spatial_pattern is SpatialPattern.UNIFORM:
        return np.zeros(np.broadcast(lat, lon).shape)
    if config.spatial_pattern is SpatialPattern.WEST_GRADIENT:
        half = (spec.lon_max - spec.lon_min) / 2
        return -np.tanh(config.gradient_steepness * (lon - lon_mid) / half) * np.ones_like(lat)
    offset = lat - (lat_mid + config.band_slope * (lon - lon_mid))
    return 2.0 * np.exp(-(offset / config.band_width) ** 2) - 1.0


def _diurnal(config: SynthConfig, hours: np.ndarray) -> np.ndarray:
    hour_of_day = hours.astype(np.int64) % 24
    return config.temporal_amplitude * np.sin(2 * np.pi * hour_of_day / 24)


def _smooth_field(rng: np.random.Generator, lat: np.ndarray, lon: np.ndarray, steps: np.ndarray,
                  components: int = 3) -> np.ndarray:
    out = np.zeros((len(steps),) + lat.shape)
    for _ in range(components):
        k_lat, k_lon = rng.uniform(0.2, 1.2, size=2)
        omega = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(k_lat * lat + k_lon * lon + omega * steps[:, None, None] + phase)
    return out * np.sqrt(2.0 / components)


def generate_grid_fields(config: SynthConfig, spec: Optional[GridSpec] = None, hours: Sequence = (),
                         schema: Optional[FeatureSchema] = None, representative: str = "center") -> GridTruth:
    """Hourly node fields for every schema variable plus the true per-cell probabilities"""
    spec = spec or GridSpec()
    schema = schema or canonical_schema()
    _check_schema(config, schema)
    hours = np.unique(np.asarray(hours, dtype="datetime64[h]"))
    if hours.size == 0:
        raise BadValue("generate_grid_fields needs at least one hour")
    rng = substream(config.seed, _GRID)

    lat, lon = np.meshgrid(spec.node_lats(), spec.node_lons(), indexing="ij")
    signal = config.pattern_strength * _pattern(config, lat, lon, spec)[None] + _diurnal(config, hours)[:, None, None]
    steps = (hours - hours[0]).astype(np.int64).astype(np.float64)
    weights = config.weights

    fields: Dict[str, GridField] = {}
    for j, name in enumerate(schema.names):
        if weights[j] != 0.0:
            values = np.sign(weights[j]) * signal
        else:
            values = _smooth_field(rng, lat, lon, steps)
        fields[name] = GridField(spec=spec, variable=name, times=hours, values=values)

    c_lat, c_lon = spec.representative_points(representative)
    prob = np.stack([
        true_probability(config, interp_to_points(fields, schema, c_lat, c_lon, h)).reshape(spec.shape)
        for h in hours
    ])
    pattern = _pattern(config, c_lat, c_lon, spec).reshape(spec.shape)
    logger.info(f"Generated {len(fields)} gridded fields over {hours.size} hours ({config.spatial_pattern.value})")
    return GridTruth(fields=fields, hours=hours, prob=prob, pattern=pattern)


def generate_turbines_and_strikes(config: SynthConfig, truth: GridTruth,
                                  spec: Optional[GridSpec] = None) -> Tuple[TurbineSet, list]:
    """Uniform turbines; per turbine-hour a strike with probability strike_rate * true probability"""
    spec = spec or next(iter(truth.fields.values())).spec
    rng = substream(config.seed, _TURBINES)
    n = config.n_turbines
    lat = rng.uniform(spec.lat_min, spec.lat_max, size=n)
    lon = rng.uniform(spec.lon_min, spec.lon_max, size=n)
    turbines = TurbineSet(ids=tuple(f"T{i:05d}" for i in range(n)), lat=lat, lon=lon)

    rows = np.minimum(((lat - spec.lat_min) / spec.step).astype(np.intp), spec.n_rows - 1)
    cols = np.minimum(((lon - spec.lon_min) / spec.step).astype(np.intp), spec.n_cols - 1)
    strikes = []
    for k, hour in enumerate(truth.hours):
        p = config.strike_rate * truth.prob[k, rows, cols]
        hit = np.flatnonzero(rng.random(n) < p)
        if hit.size == 0:
            continue
        # strikes land within half the default match radius of their turbine
        radius = 0.0015 * np.sqrt(rng.random(hit.size))
        angle = rng.uniform(0, 2 * np.pi, size=hit.size)
        minutes = rng.integers(0, 60, size=hit.size)
        for i, r, a, m in zip(hit, radius, angle, minutes):
            strikes.append(StrikeEvent(timestamp=hour.astype("datetime64[m]") + np.timedelta64(int(m), "m"),
                                       lat=float(np.clip(lat[i] + r * np.sin(a), spec.lat_min, spec.lat_max)),
                                       lon=float(np.clip(lon[i] + r * np.cos(a), spec.lon_min, spec.lon_max))))
    strikes.sort(key=lambda s: (s.timestamp, s.lat, s.lon))
    logger.info(f"Generated {n} turbines and {len(strikes)} strikes")
    return turbines, strikes


def write_truth(truth: GridTruth, spec: GridSpec, path: PathLike) -> None:
    t_idx, r_idx, c_idx = np.indices(truth.prob.shape)
    labels = np.array([s + ":00Z" for s in np.datetime_as_string(truth.hours, unit="h")], dtype=object)
    frame = pd.DataFrame({
        "time": labels[t_idx.ravel()],
        "cell_lat_min": [repr(v) for v in spec.cell_lat_min()[r_idx.ravel()].tolist()],
        "cell_lon_min": [repr(v) for v in spec.cell_lon_min()[c_idx.ravel()].tolist()],
        "true_prob": [repr(v) for v in truth.prob.ravel().tolist()],
    })
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write truth table {path}: {e}") from e


def write_synth_bundle(config: SynthConfig, out_dir: PathLike, spec: Optional[GridSpec] = None,
                       hours: Sequence = (), grid_format: str = "csv") -> Dict[str, Path]:
    """Write features, pool, grids, turbines, strikes, truth and the hour list; returns artifact paths"""
    out_dir = Path(out_dir)
    spec = spec or GridSpec()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out_dir}: {e}") from e

    paths = {name: out_dir / file for name, file in (
        ("features", "features.csv"), ("pool", "pool.csv"), ("turbines", "turbines.csv"),
        ("strikes", "strikes.csv"), ("truth", "truth.csv"), ("hours", "hours.txt"))}
    tower, _ = generate_tower_dataset(config)
    save_feature_table(tower, paths["features"])
    save_feature_table(generate_negative_pool(config), paths["pool"])

    truth = generate_grid_fields(config, spec, hours)
    paths["grids"] = save_grid_fields(truth.fields, out_dir / "grids", grid_format)
    write_truth(truth, spec, paths["truth"])
    turbines, strikes = generate_turbines_and_strikes(config, truth, spec)
    write_turbines(turbines, paths["turbines"])
    write_strikes(strikes, paths["strikes"])
    try:
        paths["hours"].write_text("".join(s + ":00Z\n" for s in np.datetime_as_string(truth.hours, unit="h")),
                                  encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write hour list: {e}") from e
    logger.info(f"Synthetic bundle written to {out_dir}")
    return paths
