"""
Tests for database operations.
"""
import pytest
from sqlalchemy import create_engine, inspect, text
from sqlalchemy.pool import StaticPool

from database import (
    find_runs, get_db, init_db, load_transcript, record_run, record_transcript, transcript_id,
)
from models import ObjectSpec, PlannerTranscript, RunRow, SemanticLayout, TranscriptRow


def _transcript(responses=("{}",), parsed=None):
    return PlannerTranscript(
        prompt="a chicken on a hot air balloon",
        request_text="instructions\n\na chicken on a hot air balloon",
        raw_response_text=responses[-1],
        reasoning_text="1. Objects",
        responses=list(responses),
        parsed_layout=parsed,
        repair_attempts=len(responses) - 1,
    )


class TestDatabaseInit:
    """Test database initialization."""

    def test_init_db_creates_tables(self):
        """Test that init_db creates the runs and transcripts tables."""
        engine = create_engine("sqlite:///:memory:", poolclass=StaticPool)
        init_db(bind=engine)
        tables = inspect(engine).get_table_names()
        assert 'runs' in tables
        assert 'planner_transcripts' in tables

    def test_init_db_adds_missing_columns(self):
        """Test that an older runs table gets the new columns."""
        engine = create_engine("sqlite:///:memory:", poolclass=StaticPool)
        with engine.begin() as conn:
            conn.execute(text("CREATE TABLE runs (id VARCHAR PRIMARY KEY, prompt TEXT NOT NULL)"))
        init_db(bind=engine)
        columns = {col['name'] for col in inspect(engine).get_columns('runs')}
        assert {'run_dir', 'planner', 'master_seed', 'config', 'config_hash'} <= columns

    def test_init_db_is_idempotent(self, test_engine):
        """Test that running init_db twice is harmless."""
        init_db(bind=test_engine)
        init_db(bind=test_engine)
        assert 'runs' in inspect(test_engine).get_table_names()

    def test_database_connection(self, test_db):
        """Test that database connection works."""
        result = test_db.execute(text("SELECT 1")).scalar()
        assert result == 1


class TestGetDB:
    """Test the get_db generator."""

    def test_get_db_yields_session(self):
        """Test that get_db yields a valid session and closes it."""
        db_gen = get_db()
        db = next(db_gen)
        assert db is not None
        with pytest.raises(StopIteration):
            next(db_gen)


class TestRunIndex:
    """Test run rows."""

    def test_record_run_inserts(self, test_db):
        """Test that a run row is stored with its config snapshot."""
        record_run(test_db, "red-s0", "a red circle", "runs/red-s0", "rule", 0, {"t_p": 0.91}, "abc")
        row = test_db.get(RunRow, "red-s0")
        assert row.prompt == "a red circle"
        assert row.config == {"t_p": 0.91}
        assert row.config_hash == "abc"

    def test_record_run_replaces(self, test_db):
        """Test that re-recording a run id updates the row in place."""
        record_run(test_db, "run", "first", "runs/run", "rule", 0, {}, "h1")
        record_run(test_db, "run", "second", "runs/run", "llm", 3, {}, "h2")
        rows = test_db.query(RunRow).all()
        assert len(rows) == 1
        assert rows[0].prompt == "second"
        assert rows[0].planner == "llm"
        assert rows[0].master_seed == 3

    def test_find_runs_filters_and_orders(self, test_db):
        """Test prompt filtering and id ordering."""
        record_run(test_db, "b", "same", "runs/b", "rule", 0, {}, "h")
        record_run(test_db, "a", "same", "runs/a", "rule", 0, {}, "h")
        record_run(test_db, "c", "other", "runs/c", "rule", 0, {}, "h")
        assert [r.id for r in find_runs(test_db)] == ["a", "b", "c"]
        assert [r.id for r in find_runs(test_db, prompt="same")] == ["a", "b"]


class TestTranscripts:
    """Test planner transcript storage."""

    def test_transcript_id_depends_on_responses(self):
        """Test that the row id changes with the responses."""
        assert transcript_id(_transcript(("one",))) != transcript_id(_transcript(("two",)))
        assert transcript_id(_transcript(("one",))) == transcript_id(_transcript(("one",)))

    def test_record_and_load_transcript(self, test_db):
        """Test that a transcript with a parsed layout survives storage."""
        layout = SemanticLayout(
            objects=(ObjectSpec(id=1, caption="a chicken", box=(0.4, 0.1, 0.6, 0.4), depth=1),),
            background_caption="a plain gray background",
            base_caption="a chicken",
            canvas_size=32,
        )
        transcript = _transcript(("bad", "good"), parsed=layout)
        row = record_transcript(test_db, transcript)

        loaded = load_transcript(test_db, row.id)
        assert loaded.responses == ["bad", "good"]
        assert loaded.repair_attempts == 1
        assert loaded.parsed_layout == layout

    def test_record_transcript_without_layout(self, test_db):
        """Test that failed planning calls are kept with a null layout."""
        row = record_transcript(test_db, _transcript(("garbage",)))
        assert test_db.get(TranscriptRow, row.id).parsed_layout is None
        assert load_transcript(test_db, "missing") is None
