import logging
from datetime import datetime, timezone
from functools import lru_cache

from sqlalchemy import JSON, Column, DateTime, Float, Integer, String, create_engine, select
from sqlalchemy.orm import DeclarativeBase, Session

from app import get_settings

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    __tablename__ = "run_record"

    id = Column(Integer, primary_key=True)
    command = Column(String(32), nullable=False)
    started_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    duration_seconds = Column(Float)
    exit_status = Column(String(16), default="ok")  # 'ok' or an error code
    tool_version = Column(String(32))
    manifest = Column(JSON)

    def __repr__(self):
        return f'<RunRecord {self.command} #{self.id}>'


@lru_cache(maxsize=4)
def get_engine(database_url: str):
    engine = create_engine(database_url)
    Base.metadata.create_all(engine)
    return engine


def record_run(manifest, exit_status: str = "ok", database_url: str | None = None):
    """Append a RunRecord; does nothing unless a database URL is configured"""
    database_url = database_url or get_settings().database_url
    if not database_url:
        return None
    started = datetime.fromisoformat(manifest.started_at) if manifest.started_at else None
    record = RunRecord(
        command=manifest.command,
        started_at=started,
        duration_seconds=manifest.duration_seconds,
        exit_status=exit_status,
        tool_version=manifest.tool_version,
        manifest=manifest.to_dict(),
    )
    try:
        with Session(get_engine(database_url)) as session:
            session.add(record)
            session.commit()
            logger.info(f"Recorded run {record.id} ({manifest.command})")
            return record.id
    except Exception as e:
        logger.error(f"Could not record run in {database_url}: {str(e)}")
        return None


def list_runs(database_url: str, command: str | None = None) -> list:
    with Session(get_engine(database_url)) as session:
        query = select(RunRecord).order_by(RunRecord.id)
        if command:
            query = query.where(RunRecord.command == command)
        return list(session.scalars(query))
