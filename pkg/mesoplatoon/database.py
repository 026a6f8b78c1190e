"""Run registry backed by SQLAlchemy.

Every simulate/analyze/sweep invocation is recorded with the config hash,
seed and dt that produced it.  The registry uses RUN_DATABASE_URL when set
and otherwise a SQLite file inside the output directory.  Registry problems
never stop a run: on failure the registry falls back to SQLite, and if that
fails too it disables itself with a warning.
"""

import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from sqlalchemy import Column, DateTime, Float, Integer, String, create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import declarative_base, sessionmaker

from .config import DB_TIMEOUT, RUN_DATABASE_NAME, RUN_DATABASE_URL

logger = logging.getLogger(__name__)

# SQLAlchemy base
Base = declarative_base()


class RunModel(Base):
    """SQLAlchemy model for recorded runs."""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    created = Column(DateTime, nullable=False)
    command = Column(String, nullable=False)      # simulate / analyze / sweep
    config_name = Column(String, nullable=False)
    config_sha256 = Column(String)
    policy = Column(String)
    seed = Column(Integer)
    dt = Column(Float)
    n_vehicles = Column(Integer)
    gamma_tilde = Column(Float)
    verdict = Column(String)
    output_dir = Column(String)


@dataclass
class RunRecord:
    """One registry entry."""
    command: str
    config_name: str
    config_sha256: Optional[str] = None
    policy: Optional[str] = None
    seed: Optional[int] = None
    dt: Optional[float] = None
    n_vehicles: Optional[int] = None
    gamma_tilde: Optional[float] = None
    verdict: Optional[str] = None
    output_dir: Optional[str] = None
    created: Optional[datetime] = None
    id: Optional[int] = None


def _record_from_model(model: RunModel) -> RunRecord:
    return RunRecord(
        id=model.id, created=model.created, command=model.command, config_name=model.config_name,
        config_sha256=model.config_sha256, policy=model.policy, seed=model.seed, dt=model.dt,
        n_vehicles=model.n_vehicles, gamma_tilde=model.gamma_tilde, verdict=model.verdict,
        output_dir=model.output_dir,
    )


def sqlite_url(directory: Path) -> str:
    return f"sqlite:///{Path(directory) / RUN_DATABASE_NAME}"


class Database:
    """Run registry supporting SQLite and any SQLAlchemy URL."""

    def __init__(self, output_dir: Path, database_url: Optional[str] = None):
        self.output_dir = Path(output_dir)
        self.database_url = database_url or RUN_DATABASE_URL or sqlite_url(self.output_dir)
        self.enabled = True
        self.engine = self._create_engine()
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        self.init_db()

    def _create_engine(self):
        """Create SQLAlchemy engine."""
        if self.database_url.startswith("sqlite"):
            self.output_dir.mkdir(parents=True, exist_ok=True)
            return create_engine(self.database_url, connect_args={"timeout": DB_TIMEOUT})
        return create_engine(self.database_url, pool_pre_ping=True)

    def init_db(self) -> None:
        """Create the schema. Falls back to SQLite, then to a disabled registry."""
        try:
            Base.metadata.create_all(bind=self.engine)
            logger.debug(f"Run registry ready at {self.database_url}")
            return
        except Exception as e:
            logger.error(f"Run registry initialization failed: {e}")

        fallback = sqlite_url(self.output_dir)
        if self.database_url != fallback:
            logger.warning("Falling back to a SQLite run registry in the output directory")
            try:
                self.database_url = fallback
                self.engine = self._create_engine()
                self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
                Base.metadata.create_all(bind=self.engine)
                logger.info(f"SQLite fallback registry initialized at {fallback}")
                return
            except Exception as e:
                logger.error(f"SQLite fallback registry failed: {e}")
        logger.warning("Run registry disabled; runs will not be recorded")
        self.enabled = False

    def record_run(self, record: RunRecord) -> Optional[int]:
        """Insert a run, return its id (None when the registry is disabled or the insert fails)."""
        if not self.enabled:
            return None
        with self.SessionLocal() as session:
            try:
                model = RunModel(
                    created=record.created or datetime.now(timezone.utc),
                    command=record.command,
                    config_name=record.config_name,
                    config_sha256=record.config_sha256,
                    policy=record.policy,
                    seed=record.seed,
                    dt=record.dt,
                    n_vehicles=record.n_vehicles,
                    gamma_tilde=record.gamma_tilde,
                    verdict=record.verdict,
                    output_dir=record.output_dir,
                )
                session.add(model)
                session.flush()  # Get the ID
                run_id = model.id
                session.commit()
                logger.debug(f"Recorded {record.command} run of {record.config_name} (ID: {run_id})")
                return run_id
            except SQLAlchemyError as e:
                session.rollback()
                logger.warning(f"Failed to record run: {e}")
                return None

    def get_run(self, run_id: int) -> Optional[RunRecord]:
        """Get run by ID."""
        if not self.enabled:
            return None
        with self.SessionLocal() as session:
            model = session.get(RunModel, run_id)
            return _record_from_model(model) if model else None

    def list_runs(self, limit: int = 20) -> List[RunRecord]:
        """Most recent runs first."""
        if not self.enabled:
            return []
        with self.SessionLocal() as session:
            models = session.query(RunModel).order_by(RunModel.id.desc()).limit(limit).all()
            return [_record_from_model(model) for model in models]

    def close(self) -> None:
        self.engine.dispose()
