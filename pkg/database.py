import hashlib
import json
import logging
from typing import Iterator, List, Optional

from sqlalchemy import create_engine, inspect, text
from sqlalchemy.orm import sessionmaker, Session

from config import Config
from models import Base, RunRow, TranscriptRow, PlannerTranscript

logger = logging.getLogger(__name__)

engine = create_engine(
    Config.SQLALCHEMY_DATABASE_URI,
    pool_pre_ping=True,
    echo=False
)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def init_db(bind=None):
    """Create all tables and add any columns missing from older databases."""
    bind = bind or engine
    Base.metadata.create_all(bind=bind)

    inspector = inspect(bind)
    for table_name in ('runs', 'planner_transcripts'):
        if table_name not in inspector.get_table_names():
            continue
        existing_columns = [col['name'] for col in inspector.get_columns(table_name)]
        required_columns = {col.name: col for col in Base.metadata.tables[table_name].columns}

        with bind.begin() as conn:
            for col_name, col_obj in required_columns.items():
                if col_name not in existing_columns:
                    col_type = str(col_obj.type.compile(dialect=bind.dialect))
                    logger.info("adding column %s.%s", table_name, col_name)
                    conn.execute(text(f"ALTER TABLE {table_name} ADD COLUMN {col_name} {col_type} NULL"))


def get_db() -> Iterator[Session]:  # usage: with contextlib.closing(...) or next(get_db())
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


# ================== Run index ==================

def record_run(db: Session, run_id: str, prompt: str, run_dir: str, planner: str,
               master_seed: int, config: dict, config_hash: str) -> RunRow:
    """Insert or replace the index row for a run directory."""
    row = db.get(RunRow, run_id)
    if row is None:
        row = RunRow(id=run_id)
        db.add(row)
    row.prompt = prompt
    row.run_dir = run_dir
    row.planner = planner
    row.master_seed = master_seed
    row.config = config
    row.config_hash = config_hash
    db.commit()
    return row


def find_runs(db: Session, prompt: Optional[str] = None) -> List[RunRow]:
    query = db.query(RunRow)
    if prompt is not None:
        query = query.filter_by(prompt=prompt)
    return query.order_by(RunRow.id).all()


# ================== Planner transcripts ==================

def transcript_id(transcript: PlannerTranscript) -> str:
    digest = hashlib.sha256()
    digest.update(transcript.request_text.encode('utf-8'))
    for response in transcript.responses:
        digest.update(b'\0')
        digest.update(response.encode('utf-8'))
    return digest.hexdigest()


def record_transcript(db: Session, transcript: PlannerTranscript) -> TranscriptRow:
    row_id = transcript_id(transcript)
    row = db.get(TranscriptRow, row_id)
    if row is None:
        row = TranscriptRow(id=row_id)
        db.add(row)
    row.prompt = transcript.prompt
    row.request_text = transcript.request_text
    row.raw_response_text = transcript.raw_response_text
    row.reasoning_text = transcript.reasoning_text
    row.responses = list(transcript.responses)
    row.parsed_layout = (json.loads(transcript.parsed_layout.model_dump_json())
                         if transcript.parsed_layout is not None else None)
    row.repair_attempts = transcript.repair_attempts
    row.clamped_fields = list(transcript.clamped_fields)
    db.commit()
    return row


def load_transcript(db: Session, row_id: str) -> Optional[PlannerTranscript]:
    row = db.get(TranscriptRow, row_id)
    if row is None:
        return None
    return PlannerTranscript(
        prompt=row.prompt,
        request_text=row.request_text,
        raw_response_text=row.raw_response_text or "",
        reasoning_text=row.reasoning_text or "",
        responses=row.responses or [],
        parsed_layout=row.parsed_layout,
        repair_attempts=row.repair_attempts or 0,
        clamped_fields=row.clamped_fields or [],
    )
