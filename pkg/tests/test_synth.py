import numpy as np
import pandas as pd
import pytest

from src.data_model import canonical_schema, load_feature_table
from src.errors import BadValue
from src.geospatial import GridSpec, load_grid_fields, load_strikes, load_turbines
from src.rng import substream
from src.synth import (SpatialPattern, SynthConfig, draw_labeled_situations, generate_grid_fields,
                       generate_negative_pool, generate_tower_dataset, generate_turbines_and_strikes,
                       synthetic_event_days, write_synth_bundle)

HOURS = np.datetime64("2019-01-10T00", "h") + np.arange(6)


def test_default_truth_has_three_signal_variables():
    config = SynthConfig()
    assert len(config.coefficients) == 35
    assert list(config.signal_variables()) == [0, 1, 2]
    with pytest.raises(ValueError):
        SynthConfig(coefficients=(0.0,) * 35)


def test_generation_is_deterministic(small_synth):
    a, p_a = generate_tower_dataset(small_synth)
    b, p_b = generate_tower_dataset(small_synth)
    assert a == b
    np.testing.assert_array_equal(p_a, p_b)
    assert generate_negative_pool(small_synth) == generate_negative_pool(small_synth)
    other, _ = generate_tower_dataset(small_synth.model_copy(update={"seed": 4}))
    assert other != a


def test_labels_follow_the_logistic_truth():
    X, y, p = draw_labeled_situations(SynthConfig(seed=2), 100_000, substream(1))
    assert X.shape == (100_000, 35)
    assert abs(y.mean() - p.mean()) <= 0.01
    high = p > 0.8
    assert abs(y[high].mean() - p[high].mean()) <= 0.01


def test_tower_dataset_layout(small_synth, tower):
    days = synthetic_event_days(small_synth)
    assert len(days) == small_synth.n_event_days
    assert sorted(tower.event_days()) == [d.item() for d in days]
    for day in tower.event_days():
        assert tower.y[tower.day_mask({day})].sum() == small_synth.ul_rows_per_event_day
    assert np.all(tower.lat == small_synth.tower_lat)


def test_tower_dataset_needs_two_days():
    with pytest.raises(BadValue):
        generate_tower_dataset(SynthConfig(n_event_days=1))
    dataset, _ = generate_tower_dataset(SynthConfig(n_event_days=2, ul_rows_per_event_day=3))
    assert len(dataset.event_days()) == 2


def test_negative_pool_avoids_event_days(small_synth, tower, pool):
    assert len(pool) == small_synth.pool_size
    assert pool.n_positive == 0
    assert not np.any(pool.day_mask(tower.event_days()))
    assert np.all(pool.timestamps.astype(np.int64) % 60 == 0)
    assert set(pool.seasons()) == {"DJF", "MAM", "JJA", "SON"}


def test_west_gradient_truth_decreases_eastward():
    truth = generate_grid_fields(SynthConfig(spatial_pattern=SpatialPattern.WEST_GRADIENT), GridSpec(), HOURS)
    assert truth.prob.shape == (6, 16, 40)
    assert np.all(np.diff(truth.prob, axis=2) < 0)
    assert np.all(np.diff(truth.pattern, axis=1) < 0)


def test_frontal_band_separates_band_from_background():
    config = SynthConfig(spatial_pattern=SpatialPattern.FRONTAL_BAND)
    truth = generate_grid_fields(config, GridSpec(), HOURS)
    band = truth.pattern >= 0.5
    outside = truth.pattern <= -0.5
    assert band.any() and outside.any()
    for k in range(len(HOURS)):
        assert truth.prob[k][band].min() - truth.prob[k][outside].max() >= config.band_margin


def test_uniform_truth_is_spatially_flat():
    config = SynthConfig(spatial_pattern=SpatialPattern.UNIFORM, coefficients=(3.0, -3.0, 2.0) + (0.0,) * 32)
    truth = generate_grid_fields(config, GridSpec(), HOURS)
    assert all(np.var(truth.prob[k]) < config.uniform_epsilon for k in range(len(HOURS)))


def test_grid_fields_cover_the_schema():
    truth = generate_grid_fields(SynthConfig(), GridSpec(), HOURS)
    assert set(truth.fields) == set(canonical_schema().names)
    field = truth.fields["cape"]
    assert field.values.shape == (6, 17, 41)
    np.testing.assert_array_equal(field.times, HOURS)
    with pytest.raises(BadValue):
        generate_grid_fields(SynthConfig(), GridSpec(), [])


def test_strikes_stay_near_turbines():
    config = SynthConfig(strike_rate=1.0, n_turbines=50)
    truth = generate_grid_fields(config, GridSpec(), HOURS)
    turbines, strikes = generate_turbines_and_strikes(config, truth)
    assert len(turbines) == 50
    assert strikes
    sites = np.column_stack([turbines.lat, turbines.lon])
    for s in strikes:
        assert np.hypot(*(sites - [s.lat, s.lon]).T).min() <= 0.0015 + 1e-12
        assert np.datetime64(s.timestamp, "h") in set(HOURS)


@pytest.mark.parametrize("grid_format", ["csv", "binary"])
def test_bundle_files(tmp_path, small_synth, grid_format):
    paths = write_synth_bundle(small_synth, tmp_path / "bundle", hours=HOURS[:2], grid_format=grid_format)
    assert set(paths) == {"features", "pool", "grids", "turbines", "strikes", "truth", "hours"}
    tower = load_feature_table(paths["features"])
    assert len(tower.event_days()) == small_synth.n_event_days
    assert len(load_feature_table(paths["pool"])) == small_synth.pool_size
    assert len(load_grid_fields(paths["grids"])) == 35
    assert len(load_turbines(paths["turbines"])) == small_synth.n_turbines
    load_strikes(paths["strikes"])
    truth = pd.read_csv(paths["truth"])
    assert list(truth.columns) == ["time", "cell_lat_min", "cell_lon_min", "true_prob"]
    assert len(truth) == 2 * 640
    assert paths["hours"].read_text().splitlines() == ["2019-01-10T00:00Z", "2019-01-10T01:00Z"]


def test_tower_ul_rows_carry_detection_subtypes(small_synth, tower):
    assert set(tower.ul_subtype[tower.y == 0]) == {""}
    assert set(tower.ul_subtype[tower.y == 1]) <= {"LLS", "noLLS"}
    everything, _ = generate_tower_dataset(small_synth.model_copy(update={"lls_fraction": 1.0}))
    assert set(everything.ul_subtype[everything.y == 1]) == {"LLS"}
    np.testing.assert_array_equal(everything.X, tower.X)
    with pytest.raises(ValueError):
        SynthConfig(lls_fraction=1.5)
