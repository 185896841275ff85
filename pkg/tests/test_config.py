from pathlib import Path

import pytest

from src.config import build_run_config, config, load_config_file
from src.errors import ConfigInvalid


def test_defaults():
    cfg = build_run_config()
    assert cfg.n_trees == 500
    assert cfg.mtry == 6
    assert cfg.thresholds == [0.5]
    assert cfg.forest_params().tree_params.alpha == 0.05


def test_precedence_file_env_flags(tmp_path, monkeypatch):
    path = tmp_path / "run.yaml"
    path.write_text("n_trees: 50\nseed: 3\nn-models: 7\n")
    assert build_run_config(path).n_trees == 50

    monkeypatch.setenv("ULRISK_N_TREES", "60")
    monkeypatch.setenv("ULRISK_SEED", "4")
    cfg = build_run_config(path, {"seed": 9, "workers": None})
    assert cfg.n_trees == 60
    assert cfg.seed == 9
    assert cfg.n_models == 7
    assert cfg.workers == 1


def test_dotenv_style_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("N_TREES=40\nTHRESHOLDS=0.5,0.8\n")
    assert load_config_file(path) == {"n_trees": "40", "thresholds": "0.5,0.8"}
    cfg = build_run_config(path)
    assert cfg.n_trees == 40
    assert cfg.thresholds == [0.5, 0.8]


def test_yaml_threshold_list(tmp_path):
    path = tmp_path / "run.yml"
    path.write_text("thresholds: [0.5, 0.9]\n")
    assert build_run_config(path).thresholds == [0.5, 0.9]


@pytest.mark.parametrize("flags", [
    {"thresholds": "0.5,1.2"},
    {"metric": "f1"},
    {"workers": 0},
    {"radius": -1.0},
    {"seed": -1},
    {"no_such_option": 1},
    {"subtype": "noLLS"},
])
def test_invalid_settings_raise_config_errors(flags):
    with pytest.raises(ConfigInvalid):
        build_run_config(flags=flags)


def test_nested_yaml_rejected(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("forest:\n  n_trees: 5\n")
    with pytest.raises(ConfigInvalid):
        build_run_config(path)
    with pytest.raises(ConfigInvalid):
        build_run_config(tmp_path / "missing.yaml")


def test_inconsistent_tree_settings():
    cfg = build_run_config(flags={"min_split": 5, "min_bucket": 7})
    with pytest.raises(ConfigInvalid):
        cfg.forest_params()


def test_check_paths(tmp_path):
    (tmp_path / "features.csv").write_text("")
    cfg = build_run_config(flags={"data": tmp_path / "features.csv"})
    cfg.check_paths(["data"])
    with pytest.raises(ConfigInvalid) as info:
        cfg.check_paths(["pool"])
    assert info.value.context == {"field": "pool"}


def test_database_url(monkeypatch):
    assert config.database_url(Path("out")) == f"sqlite:///{Path('out') / 'runs.db'}"
    monkeypatch.setenv("DATABASE_URL", "postgresql://registry/runs")
    assert config.database_url(Path("out")) == "postgresql://registry/runs"


def test_subtype_selects_the_ul_rows():
    assert build_run_config().ul_subtype() is None
    assert build_run_config(flags={"subtype": "LLS"}).ul_subtype() == "LLS"
