"""
Pytest configuration and shared fixtures for the pipeline tests.
"""
import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from models import Base, ModelConfig, ObjectSpec, Relation, SemanticLayout, ShapeScene, ShapeSpec


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="Run the slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs, enabled with --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ================== DATABASE FIXTURES ==================

@pytest.fixture(scope="function")
def test_engine():
    """Create a test database engine using in-memory SQLite."""
    engine = create_engine(
        "sqlite:///:memory:",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool
    )
    Base.metadata.create_all(bind=engine)
    yield engine
    Base.metadata.drop_all(bind=engine)
    engine.dispose()


@pytest.fixture(scope="function")
def test_db(test_engine):
    """Create a test database session."""
    TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=test_engine)
    db = TestingSessionLocal()
    try:
        yield db
    finally:
        db.close()


# ================== MODEL FIXTURES ==================

@pytest.fixture
def tiny_model_config():
    """A one-block model on a 16x16 canvas (8x8 latent grid, 12 channels)."""
    return ModelConfig(depth=1, width=16, heads=2, ff_mult=2, max_text_len=24, canvas_size=16, patch_size=2)


@pytest.fixture
def tiny_model(tiny_model_config):
    from dit_model import build_model
    model = build_model(tiny_model_config, seed=0)
    model.eval()
    return model


@pytest.fixture
def full_size_tiny_model():
    """One-block model on the standard 32x32 canvas."""
    from dit_model import build_model
    model = build_model(ModelConfig(depth=1, width=16, heads=2, ff_mult=2), seed=0)
    model.eval()
    return model


# ================== SCENE FIXTURES ==================

@pytest.fixture
def two_shape_scene():
    """A red circle on the left and a blue square on the right, no overlap."""
    return ShapeScene(
        shapes=(
            ShapeSpec(kind="circle", color="red", center=(8.0, 16.0), size=10.0, depth=1, entity=0),
            ShapeSpec(kind="square", color="blue", center=(24.0, 16.0), size=10.0, depth=2, entity=1),
        ),
        background_color="gray",
        relations=(Relation(subject=0, relation="left of", object=1),),
    )


@pytest.fixture
def occlusion_scene():
    """A green square partly covering a yellow square (green in front)."""
    return ShapeScene(
        shapes=(
            ShapeSpec(kind="square", color="green", center=(14.0, 16.0), size=12.0, depth=1, entity=0),
            ShapeSpec(kind="square", color="yellow", center=(20.0, 16.0), size=12.0, depth=2, entity=1),
        ),
        background_color="gray",
        relations=(Relation(subject=0, relation="in front of", object=1),),
    )


@pytest.fixture
def sample_layout():
    """Two side-by-side objects on a 32 canvas."""
    return SemanticLayout(
        objects=(
            ObjectSpec(id=1, caption="a red circle", box=(0.05, 0.25, 0.45, 0.75), depth=1),
            ObjectSpec(id=2, caption="a blue square", box=(0.55, 0.25, 0.95, 0.75), depth=2),
        ),
        background_caption="a plain gray background",
        base_caption="a red circle to the left of a blue square",
        canvas_size=32,
    )
