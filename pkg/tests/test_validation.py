from collections import Counter

import numpy as np
import pandas as pd
import pytest

from conftest import make_schema
from src.citree import TreeParams
from src.ciforest import ForestParams
from src.data_model import Dataset
from src.errors import PoolTooSmall, SingleClassEval, TooFewDays
from src.model_store import save_ensemble
from src.rng import substream
from src.validation import (DiagnosticSummary, balanced_draws, balanced_sample, cv_auc, diagnostic_summary,
                            driver_medians, ensemble_seed, fit_ensemble, hold_out_no_ul_hours, loocv_by_day,
                            sample_no_ul_hours, write_cv_results, write_summary)

SCHEMA = make_schema(3)
PARAMS = ForestParams(n_trees=10, tree_params=TreeParams(min_split=10, min_bucket=3, mtry=3), seed=2)


def _rows(X, y, timestamps):
    n = len(timestamps)
    return Dataset(SCHEMA, X, y, np.asarray(timestamps, dtype="datetime64[m]"), np.full(n, 47.8), np.full(n, 13.1))


def _hourly(start, n, value, label, rng):
    timestamps = np.datetime64(start, "m") + (np.arange(n) * 60).astype("timedelta64[m]")
    X = value + 0.3 * rng.standard_normal((n, 3))
    return _rows(X, np.full(n, label), timestamps)


def _event_data(n_days=5, per_day=10, shift=5.0, seed=0):
    """UL rows on consecutive days, features centred at +shift"""
    rng = substream(seed)
    days = np.datetime64("2019-06-03", "D") + np.arange(n_days)
    minutes = np.arange(per_day) * 7 + 600
    timestamps = (days.astype("datetime64[m]")[:, None] + minutes.astype("timedelta64[m]")).ravel()
    X = shift + 0.3 * rng.standard_normal((len(timestamps), 3))
    return _rows(X, np.ones(len(timestamps)), timestamps)


def _spread_pool(n, shift, rng):
    # one row every 23 hours: covers every season within a year
    timestamps = np.datetime64("2018-01-01T00:00", "m") + (np.arange(n) * 23 * 60).astype("timedelta64[m]")
    return _rows(shift + 0.3 * rng.standard_normal((n, 3)), np.zeros(n), timestamps)


def test_balanced_sample_counts():
    rng = substream(3)
    positives = _hourly("2019-01-05T00:00", 100, 1.0, 1, rng)
    pool = _hourly("2018-01-01T00:00", 10_000, -1.0, 0, rng)
    sample = balanced_sample(positives, pool, substream(4))
    assert len(sample) == 200
    assert sample.n_positive == 100


def test_balanced_sample_follows_positive_seasons():
    positives = _hourly("2019-01-05T00:00", 30, 1.0, 1, substream(0))
    pool = _spread_pool(1000, -1.0, substream(1))
    sample = balanced_sample(positives, pool, substream(2))
    assert set(sample.negatives().seasons()) == {"DJF"}


def test_balanced_sample_redistributes_short_seasons():
    positives = _hourly("2019-01-05T00:00", 10, 1.0, 1, substream(0))
    winter = _hourly("2019-02-01T00:00", 3, -1.0, 0, substream(1))
    spring = _hourly("2019-04-01T00:00", 20, -1.0, 0, substream(2))
    sample = balanced_sample(positives, Dataset.concat([winter, spring]), substream(3))
    assert Counter(sample.negatives().seasons().tolist()) == {"DJF": 3, "MAM": 7}


def test_balanced_sample_pool_too_small():
    positives = _hourly("2019-01-05T00:00", 10, 1.0, 1, substream(0))
    pool = _hourly("2019-01-01T00:00", 9, -1.0, 0, substream(1))
    with pytest.raises(PoolTooSmall):
        balanced_sample(positives, pool, substream(2))


def test_balanced_sample_is_deterministic():
    positives = _hourly("2019-01-05T00:00", 20, 1.0, 1, substream(0))
    pool = _spread_pool(500, -1.0, substream(1))
    assert balanced_sample(positives, pool, substream(9)) == balanced_sample(positives, pool, substream(9))


def test_loocv_fold_bookkeeping_and_leakage():
    data = _event_data(n_days=5)
    pool = _spread_pool(600, -5.0, substream(1))
    results = loocv_by_day(data, pool, PARAMS)
    assert len(results) == 5
    held_out = [r.fold.held_out_day for r in results]
    assert sorted(held_out) == sorted(data.event_days())
    assert sum(len(r.fold.test) for r in results) == len(data)
    for r in results:
        train_days = set(r.fold.train.days().tolist())
        test_days = set(r.fold.test.days().tolist())
        assert not train_days & test_days
        assert r.fold.train.n_positive * 2 == len(r.fold.train)
        assert len(r.probabilities) == len(r.fold.test)


def test_loocv_pool_rows_on_held_out_day_never_train():
    data = _event_data(n_days=3)
    on_event_days = _rows(np.full((3, 3), -5.0), np.zeros(3),
                          np.array(["2019-06-03T01:00", "2019-06-04T01:00", "2019-06-05T01:00"], dtype="datetime64[m]"))
    pool = Dataset.concat([_spread_pool(300, -5.0, substream(1)), on_event_days])
    for r in loocv_by_day(data, pool, PARAMS):
        assert r.fold.held_out_day not in set(r.fold.train.days().tolist())


def test_loocv_independent_of_workers():
    data = _event_data(n_days=4)
    pool = _spread_pool(400, -5.0, substream(1))
    a = loocv_by_day(data, pool, PARAMS, workers=1)
    b = loocv_by_day(data, pool, PARAMS, workers=3)
    for x, y in zip(a, b):
        assert x.fold.held_out_day == y.fold.held_out_day
        assert x.model_seed == y.model_seed
        np.testing.assert_array_equal(x.probabilities, y.probabilities)


def test_loocv_needs_two_event_days():
    data = _event_data(n_days=1)
    with pytest.raises(TooFewDays):
        loocv_by_day(data, _spread_pool(100, -5.0, substream(1)), PARAMS)


def test_loocv_keeps_one_model_per_event_day(small_synth, tower, pool):
    params = ForestParams(n_trees=2, tree_params=TreeParams(min_split=10, min_bucket=3), seed=0)
    results = loocv_by_day(tower, pool, params, keep_models=True)
    assert len(results) == small_synth.n_event_days
    assert len({id(r.model) for r in results}) == small_synth.n_event_days


def test_separable_truth_gives_confident_diagnoses():
    data = _event_data(n_days=5)
    pool = _spread_pool(600, -5.0, substream(1))
    results = loocv_by_day(data, pool, PARAMS)
    no_ul, training_pool = hold_out_no_ul_hours(pool, 2, substream(5), exclude_days=data.event_days())
    ensemble = fit_ensemble(data, training_pool, PARAMS, n_models=3)
    summary = diagnostic_summary(results, no_ul, ensemble)
    assert summary.tp_median >= 0.9
    assert summary.fp_median <= 0.1
    assert summary.auc() == 1.0


def test_fit_ensemble_members_use_their_own_draws():
    data = _event_data(n_days=3)
    pool = _spread_pool(400, -5.0, substream(1))
    ensemble = fit_ensemble(data, pool, PARAMS, n_models=3)
    assert len(ensemble) == 3
    assert len({m.params.seed for m in ensemble.models}) == 3
    draws = balanced_draws(data.positives(), pool, 3, ensemble_seed(PARAMS))
    assert [m.n_train for m in ensemble.models] == [len(d) for d in draws]
    assert draws[0] != draws[1]


def test_sample_no_ul_hours_per_season_and_year():
    pool = _spread_pool(800, -5.0, substream(1))
    sample = sample_no_ul_hours(pool, 2, substream(4))
    assert np.all(sample.timestamps.astype(np.int64) % 60 == 0)
    assert len(set(sample.days().tolist())) == len(sample)
    frame = pd.DataFrame({"season": sample.seasons(), "month": sample.months(),
                          "year": sample.timestamps.astype("datetime64[Y]").astype(int) + 1970})
    frame["season_year"] = frame["year"] + (frame["month"] == 12)
    assert frame.groupby(["season_year", "season"]).size().max() <= 2


def test_sample_no_ul_hours_skips_excluded_days():
    pool = _spread_pool(200, -5.0, substream(1))
    blocked = set(pool.days()[:50].tolist())
    sample = sample_no_ul_hours(pool, 3, substream(2), exclude_days=blocked)
    assert not set(sample.days().tolist()) & blocked


def test_diagnostic_summary_quartiles_and_auc():
    summary = DiagnosticSummary(tp_probs=np.array([0.6, 0.7, 0.8, 0.9, 1.0]), fp_probs=np.array([0.0, 0.1, 0.2]))
    assert summary.tp_median == pytest.approx(0.8)
    assert summary.tp_quartiles == pytest.approx((0.7, 0.8, 0.9))
    assert summary.auc() == 1.0
    with pytest.raises(SingleClassEval):
        DiagnosticSummary(tp_probs=np.array([0.5]), fp_probs=np.array([])).auc()


def test_cv_outputs_are_byte_stable(tmp_path):
    data = Dataset.concat([_event_data(n_days=3), _hourly("2019-06-03T02:00", 4, -5.0, 0, substream(8))])
    pool = _spread_pool(400, -5.0, substream(1))
    for run in ("a", "b"):
        results = loocv_by_day(data, pool, PARAMS)
        write_cv_results(results, tmp_path / f"{run}.csv")
        write_summary(diagnostic_summary(results), tmp_path / f"{run}_summary.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_summary.csv").read_bytes() == (tmp_path / "b_summary.csv").read_bytes()
    frame = pd.read_csv(tmp_path / "a.csv")
    assert list(frame.columns) == ["fold_day", "row_timestamp", "label", "diagnosed_probability"]
    assert len(frame) == len(data)
    assert 0.0 <= cv_auc(results) <= 1.0


def test_driver_medians():
    data = _event_data(n_days=2)
    medians = driver_medians(data, ["v0", "v2"])
    assert set(medians) == {"v0", "v2"}
    assert medians["v0"] == pytest.approx(float(np.median(data.X[:, 0])))


@pytest.mark.slow
def test_loocv_over_combined_tower_record():
    data = _event_data(n_days=406, per_day=2)
    pool = _spread_pool(2000, -5.0, substream(1))
    params = ForestParams(n_trees=1, tree_params=TreeParams(min_split=10, min_bucket=3, mtry=3), seed=0)
    results = loocv_by_day(data, pool, params, workers=4)
    assert len(results) == 406
    assert len({r.fold.held_out_day for r in results}) == 406


def test_held_out_no_ul_hours_never_reach_ensemble_training():
    data = _event_data(n_days=3)
    pool = _spread_pool(400, -5.0, substream(1))
    no_ul, training_pool = hold_out_no_ul_hours(pool, 2, substream(5), exclude_days=data.event_days())
    held_days = set(no_ul.days().tolist())
    assert held_days
    assert not held_days & set(training_pool.days().tolist())
    assert len(training_pool) == int((~pool.day_mask(held_days)).sum())

    held = set(no_ul.timestamps.tolist())
    for draw in balanced_draws(data.positives(), training_pool, 3, ensemble_seed(PARAMS)):
        assert not held & set(draw.negatives().timestamps.tolist())


def test_ensemble_bundle_is_identical_for_one_or_eight_workers(tmp_path):
    data = _event_data(n_days=3)
    pool = _spread_pool(400, -5.0, substream(1))
    save_ensemble(fit_ensemble(data, pool, PARAMS, n_models=3, workers=1), tmp_path / "one")
    save_ensemble(fit_ensemble(data, pool, PARAMS, n_models=3, workers=8), tmp_path / "eight")
    files = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
    assert len(files) == 1 + 3 * 3
    for name in files:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "eight" / name).read_bytes()


def test_null_labels_center_false_positive_probabilities():
    medians = []
    for seed in range(20):
        data = _event_data(n_days=5, shift=0.0, seed=seed)
        pool = _spread_pool(400, 0.0, substream(100 + seed))
        no_ul, training_pool = hold_out_no_ul_hours(pool, 2, substream(200 + seed), exclude_days=data.event_days())
        params = PARAMS.model_copy(update={"seed": seed})
        ensemble = fit_ensemble(data, training_pool, params, n_models=3)
        summary = diagnostic_summary(loocv_by_day(data, training_pool, params), no_ul, ensemble)
        medians.append(summary.fp_median)
    assert abs(float(np.mean(medians)) - 0.5) <= 0.05
