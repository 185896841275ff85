import json

import pandas as pd
import pytest

from cli import main
from src.data_model import load_feature_table
from src.riskmap import read_riskmap_csv

FAST = ["--n-trees", "3", "--min-split", "10", "--min-bucket", "3"]


@pytest.fixture
def bundle(tmp_path):
    out = tmp_path / "bundle"
    assert main(["synth", "--output-dir", str(out), "--seed", "5", "--n-event-days", "4",
                 "--n-hours", "2", "--start-hour", "2019-12-01T12"]) == 0
    return out


def _error_record(capsys):
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("error: ")]
    assert len(lines) == 1
    return json.loads(lines[0][len("error: "):])


def test_synth_writes_the_bundle(bundle):
    for name in ("features.csv", "pool.csv", "turbines.csv", "strikes.csv", "truth.csv", "hours.txt"):
        assert (bundle / name).is_file()
    assert len(list((bundle / "grids").glob("*.csv"))) == 35
    assert (bundle / "runs.db").is_file()


def test_cv_is_reproducible(tmp_path, bundle):
    outputs = []
    for run in ("first", "second"):
        out = tmp_path / run
        assert main(["cv", "--data", str(bundle / "features.csv"), "--pool", str(bundle / "pool.csv"),
                     "--output-dir", str(out), "--seed", "1", *FAST]) == 0
        outputs.append(out)
    for name in ("cv_results.csv", "cv_summary.csv"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


def test_train_then_riskmaps(tmp_path, bundle, capsys):
    model_dir = tmp_path / "trained"
    assert main(["train", "--data", str(bundle / "features.csv"), "--pool", str(bundle / "pool.csv"),
                 "--output-dir", str(model_dir), "--n-models", "2", *FAST]) == 0
    assert (model_dir / "model").is_dir()

    out = tmp_path / "maps"
    assert main(["riskmap", "--model", str(model_dir / "model"), "--grids", str(bundle / "grids"),
                 "--hours", str(bundle / "hours.txt"), "--thresholds", "0.5,0.8",
                 "--turbines", str(bundle / "turbines.csv"), "--strikes", str(bundle / "strikes.csv"),
                 "--output-dir", str(out)]) == 0
    low = read_riskmap_csv(out / "riskmap_0.5.csv")
    high = read_riskmap_csv(out / "riskmap_0.8.csv")
    assert low.hours_total == high.hours_total == 2
    assert (high.counts <= low.counts).all()
    assert low.mask is not None
    summary = (out / "summary_0.5.txt").read_text()
    assert summary.startswith("threshold: 0.5\nhours_total: 2\n")
    assert "spearman_vs_flash_hours" in summary
    assert "threshold: 0.8" in capsys.readouterr().out

    assert main(["diagnose-grid", "--model", str(model_dir / "model"), "--grids", str(bundle / "grids"),
                 "--hours", "2019-12-01T12:00Z", "--output-dir", str(out)]) == 0
    assert (out / "rasters" / "prob_20191201T12.csv").is_file()

    imp = tmp_path / "importance"
    assert main(["importance", "--model", str(model_dir / "model"), "--data", str(bundle / "features.csv"),
                 "--pool", str(bundle / "pool.csv"), "--n-repeats", "1", "--output-dir", str(imp)]) == 0
    report = (imp / "importance.csv").read_text().splitlines()
    assert report[0] == "variable,median,model_000,model_001"
    assert len(report) == 36
    assert len((imp / "driver_medians.csv").read_text().splitlines()) == 4


def test_match_writes_cell_counts(tmp_path, bundle):
    out = tmp_path / "match"
    assert main(["match", "--turbines", str(bundle / "turbines.csv"), "--strikes", str(bundle / "strikes.csv"),
                 "--output-dir", str(out)]) == 0
    for name in ("matches.csv", "flash_hours.csv", "turbines_per_cell.csv"):
        assert (out / name).is_file()


def test_ingest_merges_two_tables(tmp_path, bundle):
    out = tmp_path / "ingest"
    assert main(["ingest", "--data", str(bundle / "features.csv"), "--merge", str(bundle / "pool.csv"),
                 "--output-dir", str(out)]) == 0
    assert len((out / "event_days.txt").read_text().splitlines()) == 4


def test_missing_required_path_is_a_config_error(tmp_path, capsys):
    assert main(["train", "--output-dir", str(tmp_path)]) == 2
    record = _error_record(capsys)
    assert record["error"] == "ConfigInvalid"
    assert record["code"] == 2
    assert record["field"] == "data"


def test_bad_threshold_is_a_config_error(tmp_path, capsys):
    assert main(["riskmap", "--thresholds", "0.5,1.5", "--output-dir", str(tmp_path)]) == 2
    assert _error_record(capsys)["code"] == 2


def test_malformed_table_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,feature,table\n1,2,3,4\n")
    assert main(["ingest", "--data", str(bad), "--output-dir", str(tmp_path / "out")]) == 3
    record = _error_record(capsys)
    assert record["error"] == "SchemaMismatch"
    assert record["code"] == 3


def test_unknown_flag_exits_with_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--no-such-flag"])
    assert info.value.code == 2
    record = _error_record(capsys)
    assert record["code"] == 2
    assert "--no-such-flag" in record["message"]


def test_bad_integer_flag_prints_error_record(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--n-trees", "many"])
    assert info.value.code == 2
    assert _error_record(capsys)["error"] == "ConfigInvalid"


def _train(bundle, out, *extra):
    return main(["train", "--data", str(bundle / "features.csv"), "--pool", str(bundle / "pool.csv"),
                 "--output-dir", str(out), "--n-models", "2", *FAST, *extra])


def test_cv_false_positives_use_hours_held_out_of_training(tmp_path, bundle):
    assert _train(bundle, tmp_path / "trained") == 0
    model = tmp_path / "trained" / "model"
    held_out = load_feature_table(model / "no_ul_holdout.csv")
    assert held_out.n_positive == 0
    assert not held_out.day_mask(load_feature_table(bundle / "features.csv").event_days()).any()

    out = tmp_path / "cv"
    assert main(["cv", "--data", str(bundle / "features.csv"), "--pool", str(bundle / "pool.csv"),
                 "--model", str(model), "--output-dir", str(out), *FAST]) == 0
    summary = pd.read_csv(out / "cv_summary.csv").set_index("group")
    assert summary.loc["fp", "n"] == len(held_out)


def test_cv_model_without_held_out_hours_needs_a_no_ul_pool(tmp_path, bundle, capsys):
    assert _train(bundle, tmp_path / "trained") == 0
    model = tmp_path / "trained" / "model"
    (model / "no_ul_holdout.csv").unlink()
    assert main(["cv", "--data", str(bundle / "features.csv"), "--pool", str(bundle / "pool.csv"),
                 "--model", str(model), "--output-dir", str(tmp_path / "cv"), *FAST]) == 2
    assert _error_record(capsys)["field"] == "no_ul_pool"


def test_lls_subtype_keeps_only_detected_ul_rows(tmp_path, bundle):
    features = load_feature_table(bundle / "features.csv")
    n_lls = int((features.ul_subtype == "LLS").sum())
    assert 0 < n_lls < features.n_positive

    out = tmp_path / "cv"
    assert main(["cv", "--data", str(bundle / "features.csv"), "--pool", str(bundle / "pool.csv"),
                 "--subtype", "LLS", "--output-dir", str(out), *FAST]) == 0
    results = pd.read_csv(out / "cv_results.csv")
    assert int((results["label"] == "UL").sum()) == n_lls
    assert _train(bundle, tmp_path / "trained", "--subtype", "LLS") == 0


def test_outputs_do_not_depend_on_worker_count(tmp_path, bundle):
    for workers in ("1", "8"):
        assert _train(bundle, tmp_path / f"train_{workers}", "--workers", workers) == 0
        assert main(["riskmap", "--model", str(tmp_path / f"train_{workers}" / "model"),
                     "--grids", str(bundle / "grids"), "--hours", str(bundle / "hours.txt"),
                     "--workers", workers, "--output-dir", str(tmp_path / f"maps_{workers}")]) == 0
    one, eight = tmp_path / "train_1" / "model", tmp_path / "train_8" / "model"
    files = sorted(p.relative_to(one) for p in one.rglob("*") if p.is_file())
    assert files
    for name in files:
        assert (one / name).read_bytes() == (eight / name).read_bytes()
    assert ((tmp_path / "maps_1" / "riskmap_0.5.csv").read_bytes()
            == (tmp_path / "maps_8" / "riskmap_0.5.csv").read_bytes())
