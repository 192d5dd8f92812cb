"""
Run registry for AOSPR experiments
Keeps experiment metadata and headline results next to the result files
"""
from sqlalchemy import create_engine, Column, Integer, String, Float, DateTime, JSON, Text
from sqlalchemy.orm import declarative_base, sessionmaker
from datetime import datetime

from config import DATABASE_URL


def make_engine(url: str = DATABASE_URL):
    """SQLite needs check_same_thread off because background tasks share the pool."""
    connect_args = {'check_same_thread': False} if url.startswith('sqlite') else {'connect_timeout': 10}
    return create_engine(
        url,
        echo=False,
        pool_pre_ping=True,     # Verify connection health before use
        connect_args=connect_args,
    )


engine = make_engine()
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()


class ExperimentRun(Base):
    """One invocation of the harness (run or one sweep point)"""
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String(200), index=True)

    status = Column(String(20), default="pending")  # pending, running, completed, failed

    config = Column(JSON)           # Validated config echo
    output_dir = Column(String(255), nullable=True)
    summary = Column(JSON, nullable=True)

    horizon = Column(Integer)
    repetitions = Column(Integer)
    seed = Column(Integer)

    error_message = Column(Text, nullable=True)

    started_at = Column(DateTime, nullable=True)
    completed_at = Column(DateTime, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)


class RegretSummary(Base):
    """Headline numbers per policy of a completed run"""
    __tablename__ = "regret_summaries"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, index=True)

    policy = Column(String(100), index=True)
    final_mean_regret = Column(Float)
    final_std_regret = Column(Float)
    mean_round_seconds = Column(Float, nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow)


def init_db(bind=None):
    """Initialize registry tables"""
    Base.metadata.create_all(bind=bind or engine)


def get_db():
    """Get registry session"""
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
