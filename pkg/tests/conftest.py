import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.citree import TreeParams
from src.ciforest import ForestParams
from src.data_model import Dataset, FeatureSchema, FeatureVariable, canonical_schema
from src.synth import SynthConfig, generate_negative_pool, generate_tower_dataset


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    """Keep logs and the run registry inside the test's tmp dir"""
    monkeypatch.setenv("ULRISK_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("DATABASE_URL", raising=False)
    for name in list(os.environ):
        if name.startswith("ULRISK_") and name != "ULRISK_LOG_DIR":
            monkeypatch.delenv(name, raising=False)


def make_schema(n: int) -> FeatureSchema:
    return FeatureSchema(variables=tuple(FeatureVariable(name=f"v{i}", unit="1") for i in range(n)))


def make_dataset(X, y, schema=None, start="2019-01-07T10:00", day_step=0, minute_step=1) -> Dataset:
    """Dataset with minute-spaced timestamps; day_step > 0 puts every row on its own day"""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    schema = schema or make_schema(X.shape[1])
    offsets = (np.arange(n) * (day_step * 24 * 60 + minute_step)).astype("timedelta64[m]")
    return Dataset(schema, X, y, np.datetime64(start, "m") + offsets,
                   lat=np.full(n, 52.0), lon=np.full(n, 11.0))


@pytest.fixture
def schema():
    return canonical_schema()


@pytest.fixture
def fast_forest_params():
    return ForestParams(n_trees=20, tree_params=TreeParams(min_split=10, min_bucket=3, mtry=6), seed=5)


@pytest.fixture
def small_synth():
    return SynthConfig(n_event_days=6, ul_rows_per_event_day=6, pool_size=300, seed=3)


@pytest.fixture
def tower(small_synth):
    dataset, _ = generate_tower_dataset(small_synth)
    return dataset


@pytest.fixture
def pool(small_synth):
    return generate_negative_pool(small_synth)
