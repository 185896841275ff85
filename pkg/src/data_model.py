"""Feature schema, labelled samples and the immutable dataset container.

Rows are observation minutes (UTC). A day is a UTC calendar date and an event
day is any date with at least one UL row; event days are the unit that
cross-validation leaves out.
"""

import logging
import math
from datetime import date, datetime
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from src.errors import BadValue, EmptyFile, IoFailure, LengthMismatch, MissingVariable, SchemaMismatch

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
CANONICAL_COUNT = 35
CANONICAL_SCHEMA_FILE = Path(__file__).parent / "resources" / f"feature_schema_v{SCHEMA_VERSION}.csv"

META_COLUMNS = ("timestamp", "lat", "lon", "label")
OPTIONAL_COLUMNS = ("ul_subtype", "source")
SEASONS = ("DJF", "MAM", "JJA", "SON")
_SEASON_OF_MONTH = np.array(["DJF", "DJF", "MAM", "MAM", "MAM", "JJA",
                             "JJA", "JJA", "SON", "SON", "SON", "DJF"])

PathLike = Union[str, Path]


class Label(str, Enum):
    UL = "UL"
    NO_UL = "noUL"


class Source(str, Enum):
    GAISBERG = "GaisbergTower"
    SAENTIS = "SaentisTower"
    GRID_CELL = "GridCell"
    SYNTHETIC = "Synthetic"


class UlSubtype(str, Enum):
    LLS = "LLS"
    NO_LLS = "noLLS"


_LABEL_TOKENS = {
    "ul": 1, "1": 1, "true": 1,
    "noul": 0, "no-ul": 0, "0": 0, "false": 0,
}
_SUBTYPE_TOKENS = {
    "": "", "lls": UlSubtype.LLS.value, "lls-detectable": UlSubtype.LLS.value,
    "nolls": UlSubtype.NO_LLS.value, "lls-non-detectable": UlSubtype.NO_LLS.value,
}
_SOURCE_TOKENS = {s.value.lower(): s.value for s in Source}


class FeatureVariable(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    unit: str
    derived: bool = False

    @field_validator("name")
    @classmethod
    def _identifier(cls, value: str) -> str:
        if not value.isidentifier():
            raise ValueError(f"variable name must be an identifier: {value!r}")
        return value


class FeatureSchema(BaseModel):
    """Ordered predictor descriptors; order is the column order everywhere."""

    model_config = ConfigDict(frozen=True)

    variables: Tuple[FeatureVariable, ...]
    version: str = SCHEMA_VERSION

    @model_validator(mode="after")
    def _unique_names(self) -> "FeatureSchema":
        names = [v.name for v in self.variables]
        if not names:
            raise ValueError("schema needs at least one variable")
        if len(set(names)) != len(names):
            raise ValueError("schema variable names must be unique")
        return self

    @property
    def count(self) -> int:
        return len(self.variables)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise MissingVariable(f"variable not in schema: {name}", variable=name) from None

    def to_csv(self, path: PathLike) -> None:
        frame = pd.DataFrame({
            "name": [v.name for v in self.variables],
            "unit": [v.unit for v in self.variables],
            "derived": ["true" if v.derived else "false" for v in self.variables],
        })
        try:
            frame.to_csv(path, index=False, lineterminator="\n")
        except OSError as e:
            raise IoFailure(f"cannot write schema to {path}: {e}") from e


def load_schema(path: Optional[PathLike] = None) -> FeatureSchema:
    """Load a schema CSV (name,unit,derived); None loads the embedded canonical one"""
    if path is None:
        return canonical_schema()
    return _read_schema(Path(path))


@lru_cache(maxsize=1)
def canonical_schema() -> FeatureSchema:
    schema = _read_schema(CANONICAL_SCHEMA_FILE)
    if schema.count != CANONICAL_COUNT:
        raise SchemaMismatch(f"canonical schema has {schema.count} variables, expected {CANONICAL_COUNT}")
    return schema


def _read_schema(path: Path) -> FeatureSchema:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise IoFailure(f"schema file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise EmptyFile(f"schema file is empty: {path}") from e
    if list(frame.columns) != ["name", "unit", "derived"]:
        raise SchemaMismatch(f"schema header must be name,unit,derived: {path}")
    variables = []
    for i, row in enumerate(frame.itertuples(index=False), start=1):
        derived = row.derived.strip().lower()
        if derived not in ("true", "false"):
            raise BadValue(f"schema row {i}: derived must be true/false, got {row.derived!r}")
        try:
            variables.append(FeatureVariable(name=row.name.strip(), unit=row.unit.strip(),
                                             derived=derived == "true"))
        except ValueError as e:
            raise BadValue(f"schema row {i}: {e}") from e
    try:
        return FeatureSchema(variables=tuple(variables))
    except ValueError as e:
        raise SchemaMismatch(f"invalid schema {path}: {e}") from e


class Sample(BaseModel):
    """One labelled situation (an observation minute at a location)."""

    model_config = ConfigDict(frozen=True)

    features: Tuple[float, ...]
    timestamp: datetime
    lat: float
    lon: float
    label: Label
    source: Source = Source.SYNTHETIC
    ul_subtype: Optional[UlSubtype] = None

    @field_validator("features")
    @classmethod
    def _finite(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not all(math.isfinite(v) for v in value):
            raise ValueError("features must be finite")
        return value

    @model_validator(mode="after")
    def _subtype_needs_ul(self) -> "Sample":
        if self.ul_subtype is not None and self.label != Label.UL:
            raise ValueError("ul_subtype is only allowed on UL rows")
        return self


def season_of(months: np.ndarray) -> np.ndarray:
    """Meteorological season (DJF/MAM/JJA/SON) of calendar months 1..12"""
    return _SEASON_OF_MONTH[np.asarray(months, dtype=int) - 1]


class Dataset:
    """Immutable column store of labelled samples sharing one schema.

    Arrays are read-only after construction, so a Dataset can be handed to
    concurrent workers without copying.
    """

    def __init__(self, schema: FeatureSchema, X, y, timestamps, lat, lon,
                 source=None, ul_subtype=None):
        X = np.array(X, dtype=np.float64)
        n = len(timestamps)
        if X.ndim != 2 or X.shape != (n, schema.count):
            raise LengthMismatch(f"feature matrix shape {X.shape} does not match "
                                 f"{n} rows x {schema.count} schema variables")
        if not np.all(np.isfinite(X)):
            row, col = np.argwhere(~np.isfinite(X))[0]
            raise BadValue(f"non-finite feature at row {row + 1}, column {schema.names[col]}",
                           row=row + 1, column=schema.names[col])
        y = np.array(y, dtype=np.int8)
        if y.shape != (n,) or not np.isin(y, (0, 1)).all():
            raise BadValue("labels must be a 0/1 vector with one entry per row")

        self.schema = schema
        self.X = X
        self.y = y
        self.timestamps = np.array(timestamps, dtype="datetime64[m]")
        self.lat = np.array(lat, dtype=np.float64)
        self.lon = np.array(lon, dtype=np.float64)
        self.source = (np.full(n, Source.SYNTHETIC.value, dtype=object) if source is None
                       else np.array(source, dtype=object))
        self.ul_subtype = (np.full(n, "", dtype=object) if ul_subtype is None
                           else np.array(ul_subtype, dtype=object))
        if not (len(self.lat) == len(self.lon) == len(self.source) == len(self.ul_subtype) == n):
            raise LengthMismatch("per-row columns differ in length")
        if np.any((self.ul_subtype != "") & (self.y == 0)):
            raise BadValue("ul_subtype is only allowed on UL rows")
        for arr in (self.X, self.y, self.timestamps, self.lat, self.lon, self.source, self.ul_subtype):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.y)

    def __repr__(self) -> str:
        return f"Dataset(rows={len(self)}, positives={self.n_positive}, variables={self.schema.count})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.schema == other.schema
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.lat, other.lat)
                and np.array_equal(self.lon, other.lon)
                and np.array_equal(self.source, other.source)
                and np.array_equal(self.ul_subtype, other.ul_subtype))

    __hash__ = None

    @property
    def n_positive(self) -> int:
        return int(self.y.sum())

    @property
    def rows(self) -> List[Sample]:
        return self.to_samples()

    def to_samples(self) -> List[Sample]:
        samples = []
        for i in range(len(self)):
            samples.append(Sample(
                features=tuple(self.X[i].tolist()),
                timestamp=self.timestamps[i].astype(datetime),
                lat=float(self.lat[i]),
                lon=float(self.lon[i]),
                label=Label.UL if self.y[i] else Label.NO_UL,
                source=Source(self.source[i]),
                ul_subtype=UlSubtype(self.ul_subtype[i]) if self.ul_subtype[i] else None,
            ))
        return samples

    @classmethod
    def from_samples(cls, schema: FeatureSchema, samples: Sequence[Sample]) -> "Dataset":
        for i, s in enumerate(samples):
            if len(s.features) != schema.count:
                raise LengthMismatch(f"sample {i} has {len(s.features)} features, schema has {schema.count}")
        return cls(
            schema,
            X=np.array([s.features for s in samples], dtype=np.float64).reshape(len(samples), schema.count),
            y=[1 if s.label == Label.UL else 0 for s in samples],
            timestamps=np.array([np.datetime64(s.timestamp, "m") for s in samples], dtype="datetime64[m]"),
            lat=[s.lat for s in samples],
            lon=[s.lon for s in samples],
            source=[s.source.value for s in samples],
            ul_subtype=[s.ul_subtype.value if s.ul_subtype else "" for s in samples],
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.schema, self.X[idx], self.y[idx], self.timestamps[idx],
                       self.lat[idx], self.lon[idx], self.source[idx], self.ul_subtype[idx])

    @classmethod
    def concat(cls, datasets: Sequence["Dataset"]) -> "Dataset":
        if not datasets:
            raise BadValue("nothing to concatenate")
        schema = datasets[0].schema
        if any(d.schema != schema for d in datasets):
            raise SchemaMismatch("cannot concatenate datasets with different schemas")
        return cls(schema,
                   np.concatenate([d.X for d in datasets]),
                   np.concatenate([d.y for d in datasets]),
                   np.concatenate([d.timestamps for d in datasets]),
                   np.concatenate([d.lat for d in datasets]),
                   np.concatenate([d.lon for d in datasets]),
                   np.concatenate([d.source for d in datasets]),
                   np.concatenate([d.ul_subtype for d in datasets]))

    def positives(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.y == 1))

    def negatives(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.y == 0))

    def with_ul_subtype(self, subtype: Optional[Union[UlSubtype, str]]) -> "Dataset":
        """Keep every no-UL row and only the UL rows of ``subtype``; None keeps everything"""
        if subtype is None:
            return self
        try:
            value = UlSubtype(subtype).value
        except ValueError as e:
            raise BadValue(f"unknown ul_subtype {subtype!r}") from e
        return self.subset(np.flatnonzero((self.y == 0) | (self.ul_subtype == value)))

    def days(self) -> np.ndarray:
        """UTC calendar date of every row"""
        return self.timestamps.astype("datetime64[D]")

    def months(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[M]").astype(np.int64) % 12 + 1

    def seasons(self) -> np.ndarray:
        return season_of(self.months())

    def event_days(self) -> FrozenSet[date]:
        return event_days(self)

    def day_mask(self, days: Iterable[date]) -> np.ndarray:
        wanted = np.array(sorted(days), dtype="datetime64[D]")
        return np.isin(self.days(), wanted)


def event_days(dataset: Dataset) -> FrozenSet[date]:
    """Distinct UTC dates carrying at least one UL row"""
    ul_days = np.unique(dataset.days()[dataset.y == 1])
    return frozenset(d.item() for d in ul_days)


def merge_event_days(a: Iterable[date], b: Iterable[date]) -> FrozenSet[date]:
    """Union of two event-day sets (e.g. two towers' records)"""
    return frozenset(a) | frozenset(b)


def load_feature_table(path: PathLike, schema: Optional[FeatureSchema] = None) -> Dataset:
    """Read a labelled feature CSV, enforcing the dataset invariants.

    The header is the schema names in order followed by
    ``timestamp,lat,lon,label`` and optionally ``ul_subtype`` and ``source``.
    Row order is preserved.
    """
    schema = schema or canonical_schema()
    path = Path(path)
    try:
        if path.stat().st_size == 0:
            raise EmptyFile(f"feature table is empty: {path}")
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise IoFailure(f"feature table not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise EmptyFile(f"feature table is empty: {path}") from e

    _check_header(list(frame.columns), schema, path)
    if len(frame) == 0:
        raise EmptyFile(f"feature table has a header but no rows: {path}")

    X = _numeric_block(frame, list(schema.names))
    coords = _numeric_block(frame, ["lat", "lon"])

    stamps = pd.to_datetime(frame["timestamp"], utc=True, format="ISO8601", errors="coerce")
    if stamps.isna().any():
        i = int(np.flatnonzero(stamps.isna().to_numpy())[0])
        raise BadValue(f"unparsable timestamp {frame['timestamp'].iat[i]!r} at row {i + 1}",
                       row=i + 1, column="timestamp")
    instants = stamps.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]")
    sub_minute = instants.astype(np.int64) % (60 * 10**9) != 0
    if sub_minute.any():
        i = int(np.flatnonzero(sub_minute)[0])
        raise BadValue(f"timestamp {frame['timestamp'].iat[i]!r} at row {i + 1} is not on a whole minute",
                       row=i + 1, column="timestamp")
    timestamps = instants.astype("datetime64[m]")

    y = np.empty(len(frame), dtype=np.int8)
    for i, token in enumerate(frame["label"]):
        value = _LABEL_TOKENS.get(token.strip().lower())
        if value is None:
            raise BadValue(f"unknown label {token!r} at row {i + 1}", row=i + 1, column="label")
        y[i] = value

    source = np.full(len(frame), Source.SYNTHETIC.value, dtype=object)
    if "source" in frame.columns:
        for i, token in enumerate(frame["source"]):
            value = _SOURCE_TOKENS.get(token.strip().lower())
            if value is None:
                raise BadValue(f"unknown source {token!r} at row {i + 1}", row=i + 1, column="source")
            source[i] = value

    subtype = np.full(len(frame), "", dtype=object)
    if "ul_subtype" in frame.columns:
        for i, token in enumerate(frame["ul_subtype"]):
            value = _SUBTYPE_TOKENS.get(token.strip().lower())
            if value is None:
                raise BadValue(f"unknown ul_subtype {token!r} at row {i + 1}", row=i + 1, column="ul_subtype")
            if value and not y[i]:
                raise BadValue(f"ul_subtype on a no-UL row at row {i + 1}", row=i + 1, column="ul_subtype")
            subtype[i] = value
    # Saentis sensors only see LLS-detectable flashes.
    subtype[(source == Source.SAENTIS.value) & (y == 1) & (subtype == "")] = UlSubtype.LLS.value

    dataset = Dataset(schema, X, y, timestamps, coords[:, 0], coords[:, 1], source, subtype)
    logger.info(f"Loaded {len(dataset)} rows ({dataset.n_positive} UL) from {path}")
    return dataset


def save_feature_table(dataset: Dataset, path: PathLike) -> None:
    """Write the canonical CSV form; loading it back yields an equal Dataset"""
    columns = list(dataset.schema.names) + list(META_COLUMNS) + list(OPTIONAL_COLUMNS)
    body = {name: [repr(v) for v in dataset.X[:, j].tolist()] for j, name in enumerate(dataset.schema.names)}
    body["timestamp"] = [s + "Z" for s in np.datetime_as_string(dataset.timestamps, unit="m")]
    body["lat"] = [repr(v) for v in dataset.lat.tolist()]
    body["lon"] = [repr(v) for v in dataset.lon.tolist()]
    body["label"] = [Label.UL.value if v else Label.NO_UL.value for v in dataset.y.tolist()]
    body["ul_subtype"] = list(dataset.ul_subtype)
    body["source"] = list(dataset.source)
    try:
        pd.DataFrame(body, columns=columns).to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write feature table {path}: {e}") from e


def _check_header(header: List[str], schema: FeatureSchema, path: Path) -> None:
    expected = list(schema.names) + list(META_COLUMNS)
    extra = header[len(expected):]
    allowed_extra = ([], ["ul_subtype"], ["source"], ["ul_subtype", "source"])
    if header[:len(expected)] == expected and extra in allowed_extra:
        return
    missing = [c for c in expected if c not in header]
    unexpected = [c for c in header if c not in expected and c not in OPTIONAL_COLUMNS]
    raise SchemaMismatch(f"header of {path} does not match schema "
                         f"(missing: {missing or '-'}, unexpected: {unexpected or '-'})",
                         missing=",".join(missing), unexpected=",".join(unexpected))


def _numeric_block(frame: pd.DataFrame, columns: List[str]) -> np.ndarray:
    block = np.column_stack([pd.to_numeric(frame[c].str.strip(), errors="coerce").to_numpy(dtype=np.float64)
                             for c in columns])
    bad = ~np.isfinite(block)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raw = frame[columns[col]].iat[row]
        raise BadValue(f"non-finite or unparsable value {raw!r} at row {row + 1}, column {columns[col]}",
                       row=row + 1, column=columns[col])
    return block
