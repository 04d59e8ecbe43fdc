#!/usr/bin/env python3
"""
Index run directories into the run registry database.

Walks a runs root, reads each run's record.json and config.json, and
inserts one row per run. Planner transcripts found next to a run are
stored as well.

Usage:
    python run_registry.py runs/
    python run_registry.py runs/ --clear  # Clear the index first
"""

import argparse
import json
import os
import sys
from pathlib import Path

# Add parent directory for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from database import SessionLocal, init_db, record_run, record_transcript
from models import PlannerTranscript, RunRow, TranscriptRow


def clear_database(session):
    """Clear all existing index rows from the database."""
    print("🗑️  Clearing existing index...")
    session.query(TranscriptRow).delete()
    session.query(RunRow).delete()
    session.commit()
    print("   Done.")


def find_run_dirs(root: Path):
    """Every directory under root that holds a record.json, sorted."""
    return sorted(path.parent for path in Path(root).rglob("record.json"))


def index_run(session, run_dir: Path, root: Path) -> bool:
    """Index one run directory. Returns True when a planner transcript was stored too."""
    record = json.loads((run_dir / "record.json").read_text(encoding="utf-8"))
    config_path = run_dir / "config.json"
    config = json.loads(config_path.read_text(encoding="utf-8")) if config_path.is_file() else {}
    run_id = run_dir.relative_to(root).as_posix() if run_dir != root else run_dir.name

    record_run(
        session,
        run_id=run_id,
        prompt=record["prompt"],
        run_dir=str(run_dir),
        planner=record.get("planner", "rule"),
        master_seed=record.get("master_seed", config.get("master_seed", 0)),
        config=config,
        config_hash=record.get("config_hash", ""),
    )

    transcript_path = run_dir / "transcript.json"
    if transcript_path.is_file():
        transcript = PlannerTranscript.model_validate_json(transcript_path.read_text(encoding="utf-8"))
        record_transcript(session, transcript)
        return True
    return False


def load_runs(session, root: Path) -> int:
    run_dirs = find_run_dirs(root)
    print(f"\n📥 Indexing runs under {root}")
    print(f"   Run directories: {len(run_dirs)}")

    transcripts = 0
    for run_dir in run_dirs:
        transcripts += index_run(session, run_dir, root)

    print(f"   ✅ Indexed {len(run_dirs)} runs")
    print(f"   ✅ Stored {transcripts} planner transcripts")
    print("\n✅ Run index updated successfully!")
    return len(run_dirs)


def main(argv=None):
    parser = argparse.ArgumentParser(
        description='Index run directories into the run registry'
    )
    parser.add_argument('runs_root', help='Directory holding run directories')
    parser.add_argument('--clear', action='store_true',
                        help='Clear the existing index before loading')

    args = parser.parse_args(argv)

    root = Path(args.runs_root)
    if not root.is_dir():
        print(f"❌ Directory not found: {root}", file=sys.stderr)
        sys.exit(2)

    # Initialize database
    print("🔧 Initializing database...")
    init_db()

    session = SessionLocal()
    try:
        if args.clear:
            clear_database(session)

        load_runs(session, root)

    except Exception as e:
        session.rollback()
        print(f"\n❌ Error: {e}", file=sys.stderr)
        raise
    finally:
        session.close()


if __name__ == '__main__':
    main()
