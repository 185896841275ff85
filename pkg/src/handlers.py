import hashlib
import logging
import uuid
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from src.database import Artifact, Run, get_db, init_db

logger = logging.getLogger(__name__)


def file_sha256(path: Union[str, Path]) -> Optional[str]:
    path = Path(path)
    if not path.is_file():
        return None
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class RunRecorder:
    """Records a subcommand run and its artifacts in the registry.

    Registry problems are logged and swallowed; they never fail a run.
    """

    def __init__(self, database_url: str, subcommand: str, seed: Optional[int] = None,
                 settings: Optional[Dict[str, Any]] = None):
        self.database_url = database_url
        self.subcommand = subcommand
        self.seed = seed
        self.settings = settings or {}
        self.run_id = uuid.uuid4().hex
        self.artifacts: List[Tuple[str, Path]] = []
        self._enabled = True

    def __enter__(self) -> "RunRecorder":
        try:
            init_db(self.database_url)
            with get_db(self.database_url) as db:
                Run.start(db, self.run_id, self.subcommand, self.seed, self.settings)
        except Exception as e:
            self._enabled = False
            logger.warning(f"Run registry unavailable ({self.database_url}): {e}")
        return self

    def artifact(self, kind: str, path: Union[str, Path]) -> Path:
        """Note an output file; hashed when the run finishes"""
        path = Path(path)
        self.artifacts.append((kind, path))
        return path

    def __exit__(self, exc_type, exc, tb) -> bool:
        if not self._enabled:
            return False
        status = "succeeded" if exc_type is None else "failed"
        try:
            with get_db(self.database_url) as db:
                for kind, path in self.artifacts:
                    targets = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
                    for target in targets:
                        Artifact.record(db, self.run_id, kind, str(target), file_sha256(target))
                Run.finish(db, self.run_id, status, None if exc is None else str(exc))
        except Exception as e:
            logger.warning(f"Could not record run {self.run_id}: {e}")
        logger.info(f"Run {self.run_id} ({self.subcommand}) {status}")
        return False
