"""
FastAPI application for the AOSPR experiment service
"""
from fastapi import FastAPI, Depends, HTTPException, BackgroundTasks
from fastapi.middleware.cors import CORSMiddleware
from sqlalchemy.orm import Session
from pydantic import BaseModel, ValidationError
from typing import Any, Dict, List, Optional
from datetime import datetime
import logging

from database import init_db, get_db, ExperimentRun, RegretSummary, SessionLocal, engine
from config import HOST, PORT, DEBUG, LOG_LEVEL, LOG_FORMAT, LOG_DATEFMT
from experiment_config import ExperimentConfig, format_errors
from harness import record_run, run

# Initialize logging
logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT, datefmt=LOG_DATEFMT)
logger = logging.getLogger(__name__)

# Create FastAPI app
app = FastAPI(
    title="AOSPR Routing Lab",
    description="Adaptive shortest-path routing experiments over a run registry",
    version="1.0.0"
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.on_event("startup")
async def startup():
    logger.info(f"AOSPR service starting on {HOST}:{PORT}")
    init_db()


@app.on_event("shutdown")
async def shutdown():
    """Cleanup on shutdown - dispose all connections"""
    logger.info("AOSPR service shutting down - disposing connections")
    engine.dispose()


# ============================================================================
# Pydantic Models
# ============================================================================

class HealthResponse(BaseModel):
    status: str
    database: str
    runs_count: int
    timestamp: datetime


class ValidationResponse(BaseModel):
    valid: bool
    config: Dict[str, Any]


class RunInfo(BaseModel):
    id: int
    name: str
    status: str
    horizon: Optional[int] = None
    repetitions: Optional[int] = None
    seed: Optional[int] = None
    created_at: datetime


class PolicyResult(BaseModel):
    policy: str
    final_mean_regret: float
    final_std_regret: float
    mean_round_seconds: Optional[float] = None


class RunDetail(RunInfo):
    config: Dict[str, Any]
    output_dir: Optional[str] = None
    summary: Optional[Dict[str, Any]] = None
    error_message: Optional[str] = None
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None
    results: List[PolicyResult] = []


def _validated(doc: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        raise HTTPException(status_code=422, detail=format_errors(e))


def _run_info(r: ExperimentRun) -> Dict[str, Any]:
    return {
        "id": r.id,
        "name": r.name,
        "status": r.status,
        "horizon": r.horizon,
        "repetitions": r.repetitions,
        "seed": r.seed,
        "created_at": r.created_at,
    }


# ============================================================================
# Background execution
# ============================================================================

def execute_run(run_id: int):
    """Run a registered experiment; the row ends completed or failed."""
    db = SessionLocal()
    try:
        row = db.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
        if row is None:
            logger.error(f"[RUN] run #{run_id} vanished before it started")
            return
        row.status = "running"
        row.started_at = datetime.utcnow()
        db.commit()
        try:
            config = ExperimentConfig.model_validate(row.config)
            result = run(config, output_dir=row.output_dir)
            record_run(db, config, result, run_row=row)
            logger.info(f"[RUN] run #{run_id} completed")
        except Exception as e:
            logger.error(f"[RUN] run #{run_id} failed: {e}", exc_info=True)
            db.rollback()
            row.status = "failed"
            row.error_message = f"{type(e).__name__}: {e}"
            row.completed_at = datetime.utcnow()
            db.commit()
    finally:
        db.close()


# ============================================================================
# Endpoints
# ============================================================================

@app.get("/health", response_model=HealthResponse)
async def health(db: Session = Depends(get_db)):
    try:
        runs_count = db.query(ExperimentRun).count()
        return {
            "status": "healthy",
            "database": "connected",
            "runs_count": runs_count,
            "timestamp": datetime.utcnow()
        }
    except Exception as e:
        logger.error(f"Health check failed: {e}")
        raise HTTPException(status_code=500, detail="Service unhealthy")


@app.post("/api/v1/validate", response_model=ValidationResponse)
async def validate_config(doc: Dict[str, Any]):
    config = _validated(doc)
    return {"valid": True, "config": config.model_dump(mode="json")}


@app.post("/api/v1/experiments", response_model=RunInfo, status_code=202)
async def create_experiment(
    doc: Dict[str, Any],
    background_tasks: BackgroundTasks,
    db: Session = Depends(get_db)
):
    config = _validated(doc)
    try:
        row = ExperimentRun(
            name=config.name,
            status="pending",
            config=config.model_dump(mode="json"),
            output_dir=config.output_dir,
            horizon=config.horizon,
            repetitions=config.repetitions,
            seed=config.seed,
        )
        db.add(row)
        db.commit()
        db.refresh(row)
    except Exception as e:
        logger.error(f"Registering run failed: {e}")
        raise HTTPException(status_code=500, detail=str(e))

    background_tasks.add_task(execute_run, row.id)
    logger.info(f"[RUN] registered run #{row.id} ({config.name})")
    return _run_info(row)


@app.get("/api/v1/experiments", response_model=List[RunInfo])
async def list_experiments(
    status: Optional[str] = None,
    db: Session = Depends(get_db)
):
    query = db.query(ExperimentRun)
    if status:
        query = query.filter(ExperimentRun.status == status)
    return [_run_info(r) for r in query.order_by(ExperimentRun.id).all()]


@app.get("/api/v1/experiments/{run_id}", response_model=RunDetail)
async def get_experiment(run_id: int, db: Session = Depends(get_db)):
    row = db.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
    if not row:
        raise HTTPException(status_code=404, detail="Run not found")
    results = db.query(RegretSummary).filter(RegretSummary.run_id == run_id).all()
    return {
        **_run_info(row),
        "config": row.config or {},
        "output_dir": row.output_dir,
        "summary": row.summary,
        "error_message": row.error_message,
        "started_at": row.started_at,
        "completed_at": row.completed_at,
        "results": [
            {
                "policy": s.policy,
                "final_mean_regret": s.final_mean_regret,
                "final_std_regret": s.final_std_regret,
                "mean_round_seconds": s.mean_round_seconds,
            }
            for s in results
        ],
    }


@app.get("/api/v1/status")
async def service_status(db: Session = Depends(get_db)):
    try:
        counts = {
            status: db.query(ExperimentRun).filter(ExperimentRun.status == status).count()
            for status in ("pending", "running", "completed", "failed")
        }
        return {
            "service": "AOSPR Routing Lab",
            "status": "running",
            "timestamp": datetime.utcnow(),
            "statistics": {
                "total_runs": sum(counts.values()),
                **{f"{k}_runs": v for k, v in counts.items()},
                "policy_results": db.query(RegretSummary).count(),
            }
        }
    except Exception as e:
        logger.error(f"Status check failed: {e}")
        raise HTTPException(status_code=500, detail=str(e))


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host=HOST, port=PORT, reload=DEBUG, log_level="info")
