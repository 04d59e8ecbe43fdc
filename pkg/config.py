import logging
import os
from dotenv import load_dotenv

load_dotenv()


def _env_bool(name: str, default: str = 'False') -> bool:
    return os.environ.get(name, default).lower() == 'true'


class Config:
    SQLALCHEMY_DATABASE_URI = os.environ.get('DATABASE_URI') or 'sqlite:///compose_prior.db'
    DEBUG = _env_bool('DEBUG')
    LOG_LEVEL = 'DEBUG' if DEBUG else os.environ.get('LOG_LEVEL', 'INFO').upper()

    # Canvas geometry (pixels per side, space-to-depth patch)
    CANVAS_SIZE = int(os.environ.get('CANVAS_SIZE', '32'))
    PATCH_SIZE = int(os.environ.get('PATCH_SIZE', '2'))

    # Artifact locations
    RUNS_DIR = os.environ.get('RUNS_DIR', 'runs')
    CORPUS_DIR = os.environ.get('CORPUS_DIR', 'data/corpus')
    CHECKPOINT_PATH = os.environ.get('CHECKPOINT_PATH', 'checkpoints/toy_dit.ckpt')

    # LLM planner / judge endpoint (any chat-completions compatible server)
    LLM_ENDPOINT_URL = os.environ.get('LLM_ENDPOINT_URL', 'https://api.openai.com/v1/chat/completions')
    LLM_MODEL = os.environ.get('LLM_MODEL', 'gpt-4.1')
    LLM_API_KEY_ENV = os.environ.get('LLM_API_KEY_ENV', 'OPENAI_API_KEY')
    LLM_FIXTURES_DIR = os.environ.get('LLM_FIXTURES_DIR', 'fixtures/llm')
    LLM_OFFLINE = _env_bool('LLM_OFFLINE')

    TORCH_THREADS = int(os.environ['TORCH_THREADS']) if os.environ.get('TORCH_THREADS') else None


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=level or Config.LOG_LEVEL,
        format='[%(name)s] %(levelname)s: %(message)s',
    )
