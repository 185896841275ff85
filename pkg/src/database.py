from datetime import datetime
from functools import lru_cache
from typing import Any, Dict, List, Optional
from sqlalchemy import Column, Integer, String, DateTime, JSON, Text, Index, ForeignKey
from sqlalchemy.orm import declarative_base
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import sessionmaker, Session, relationship
from contextlib import contextmanager


Base = declarative_base()


@lru_cache(maxsize=None)
def get_engine(database_url: str) -> Engine:
    """One engine per URL; server databases get a connection pool"""
    if database_url.startswith("sqlite"):
        return create_engine(database_url)
    return create_engine(
        database_url,
        pool_size=5,
        max_overflow=10,
        pool_timeout=30,
        pool_recycle=1800
    )


def init_db(database_url: str) -> None:
    """Create registry tables if missing"""
    Base.metadata.create_all(bind=get_engine(database_url))


@contextmanager
def get_db(database_url: str) -> Session:
    """Get database session with context management"""
    db = sessionmaker(autocommit=False, autoflush=False, bind=get_engine(database_url))()
    try:
        yield db
    finally:
        db.close()


class Run(Base):
    """One CLI invocation"""
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(64), unique=True, nullable=False)
    subcommand = Column(String(64), nullable=False)
    seed = Column(String(32), nullable=True)  # 64-bit unsigned does not fit a signed column
    settings = Column(JSON, default={})
    status = Column(String(16), nullable=False, default='running')  # running, succeeded, failed
    error = Column(Text, nullable=True)
    started_at = Column(DateTime, default=datetime.now)
    finished_at = Column(DateTime, nullable=True)

    artifacts = relationship("Artifact", back_populates="run")

    __table_args__ = (
        Index('idx_run_id', run_id),
        Index('idx_subcommand_started', subcommand, started_at.desc()),
    )

    @classmethod
    def start(cls, db: Session, run_id: str, subcommand: str, seed: Optional[int],
              settings: Dict[str, Any]) -> 'Run':
        run = cls(run_id=run_id, subcommand=subcommand, seed=None if seed is None else str(seed),
                  settings=settings)
        db.add(run)
        db.commit()
        return run

    @classmethod
    def finish(cls, db: Session, run_id: str, status: str, error: Optional[str] = None) -> Optional['Run']:
        run = db.query(cls).filter(cls.run_id == run_id).first()
        if run:
            run.status = status
            run.error = error
            run.finished_at = datetime.now()
            db.commit()
        return run

    @classmethod
    def recent(cls, db: Session, limit: int = 20) -> List['Run']:
        return db.query(cls).order_by(cls.started_at.desc()).limit(limit).all()


class Artifact(Base):
    """A file written by a run, with its content hash"""
    __tablename__ = 'artifacts'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(64), ForeignKey('runs.run_id'), nullable=False)
    kind = Column(String(64), nullable=False)
    path = Column(Text, nullable=False)
    sha256 = Column(String(64), nullable=True)
    created_at = Column(DateTime, default=datetime.now)

    run = relationship("Run", back_populates="artifacts")

    __table_args__ = (
        Index('idx_artifact_run', run_id),
    )

    @classmethod
    def record(cls, db: Session, run_id: str, kind: str, path: str, sha256: Optional[str]) -> 'Artifact':
        artifact = cls(run_id=run_id, kind=kind, path=path, sha256=sha256)
        db.add(artifact)
        db.commit()
        return artifact
