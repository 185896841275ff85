import pytest

from src.database import Artifact, Run, get_db
from src.handlers import RunRecorder, file_sha256


@pytest.fixture
def database_url(tmp_path):
    return f"sqlite:///{tmp_path / 'runs.db'}"


def test_successful_run_records_artifacts(tmp_path, database_url):
    out = tmp_path / "out"
    (out / "model").mkdir(parents=True)
    (out / "model" / "params.json").write_text("{}\n")
    (out / "cv_results.csv").write_text("fold_day\n")

    with RunRecorder(database_url, "cv", seed=2**64 - 1, settings={"n_trees": 5}) as recorder:
        recorder.artifact("model", out / "model")
        recorder.artifact("cv_results", out / "cv_results.csv")

    with get_db(database_url) as db:
        run = db.query(Run).filter(Run.run_id == recorder.run_id).one()
        assert run.status == "succeeded"
        assert run.seed == str(2**64 - 1)
        assert run.settings == {"n_trees": 5}
        assert run.finished_at is not None
        artifacts = {a.kind: a for a in db.query(Artifact).filter(Artifact.run_id == recorder.run_id)}
    assert set(artifacts) == {"model", "cv_results"}
    assert artifacts["cv_results"].sha256 == file_sha256(out / "cv_results.csv")


def test_failed_run_keeps_the_error(database_url):
    with pytest.raises(RuntimeError):
        with RunRecorder(database_url, "train") as recorder:
            raise RuntimeError("boom")
    with get_db(database_url) as db:
        run = db.query(Run).filter(Run.run_id == recorder.run_id).one()
        assert run.status == "failed"
        assert run.error == "boom"
        assert Run.recent(db)[0].run_id == recorder.run_id


def test_unreachable_registry_does_not_fail_the_run(tmp_path):
    url = f"sqlite:///{tmp_path / 'missing_dir' / 'runs.db'}"
    with RunRecorder(url, "synth") as recorder:
        recorder.artifact("features", tmp_path / "features.csv")
    assert recorder.run_id


def test_file_sha256(tmp_path):
    (tmp_path / "a.txt").write_bytes(b"abc")
    assert file_sha256(tmp_path / "a.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert file_sha256(tmp_path) is None
