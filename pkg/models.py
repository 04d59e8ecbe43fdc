import hashlib
import json

from sqlalchemy import Column, String, Integer, Text, JSON
from sqlalchemy.orm import declarative_base
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Dict, List, Literal, Optional, Tuple

Base = declarative_base()

# ================== Constants for Valid Values ==================

# Drawable shape kinds (the only nouns the toy model can synthesize)
SHAPES = ["circle", "square", "triangle"]

# 8-colour palette, RGB in [0, 1], hues maximally separated for the detector
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
COLORS = list(PALETTE)

# Plain backgrounds (never used as object colours)
BACKGROUNDS = {
    "gray": (0.5, 0.5, 0.5),
    "light gray": (0.75, 0.75, 0.75),
    "dark gray": (0.25, 0.25, 0.25),
}
DEFAULT_BACKGROUND = "gray"

# Nouns the DSL accepts beyond shapes: plannable, not drawable
EXTRA_NOUNS = ["cat", "dog", "chicken", "balloon", "cup", "butterfly", "clock", "horse", "bowl", "vase"]
NOUNS = SHAPES + EXTRA_NOUNS
PLURALS = {noun: noun + "s" for noun in NOUNS}
PLURALS["butterfly"] = "butterflies"

COUNT_WORDS = {
    "a": 1, "an": 1, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
}
NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]

RELATIONS = [
    "left of",        # subject box entirely in the left half
    "right of",
    "above",
    "below",
    "on top of",      # subject stacked directly on the object
    "in front of",    # overlapping boxes, subject closer to camera
    "behind",
    "hidden behind",  # subject mostly covered by the object
]
SPATIAL_2D_RELATIONS = {"left of", "right of", "above", "below", "on top of"}
OCCLUSION_RELATIONS = {"in front of", "behind", "hidden behind"}

# Surface form used when captions are written back out
RELATION_PHRASES = {
    "left of": "to the left of",
    "right of": "to the right of",
    "above": "above",
    "below": "below",
    "on top of": "on top of",
    "in front of": "in front of",
    "behind": "behind",
    "hidden behind": "hidden behind",
}

CATEGORIES = ["spatial", "count", "3d"]

ScheduleKind = Literal["rectified_flow", "ddim_cosine"]

# ================== SQLAlchemy Models ==================

class RunRow(Base):
    """
    One generation run, indexed from its run directory.

    The directory is the source of truth; this row lets eval and the
    registry script find runs without walking the filesystem.
    """
    __tablename__ = "runs"

    id = Column(String, primary_key=True)          # run directory name
    prompt = Column(Text, nullable=False)
    run_dir = Column(String, nullable=False)
    planner = Column(String, default="rule")       # "rule" or "llm"
    master_seed = Column(Integer, default=0)
    config = Column(JSON, nullable=False)          # GuidanceConfig snapshot
    config_hash = Column(String, nullable=False)


class TranscriptRow(Base):
    """Audit record of one LLM planning call."""
    __tablename__ = "planner_transcripts"

    id = Column(String, primary_key=True)          # sha256 of request + response
    prompt = Column(Text, nullable=False)
    request_text = Column(Text, nullable=False)
    raw_response_text = Column(Text, nullable=False, default="")
    reasoning_text = Column(Text, default="")
    responses = Column(JSON, default=list)         # every raw response, in order
    parsed_layout = Column(JSON, nullable=True)    # null when parsing failed
    repair_attempts = Column(Integer, default=0)
    clamped_fields = Column(JSON, default=list)


# ================== Pydantic Schemas ==================

class ObjectSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    caption: str
    box: Tuple[float, float, float, float]   # x0, y0, x1, y1 in the unit square
    depth: int                               # 1 = closest to camera


class SemanticLayout(BaseModel):
    model_config = ConfigDict(frozen=True)

    objects: Tuple[ObjectSpec, ...]
    background_caption: str
    base_caption: str
    canvas_size: int


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    field: str
    rule: str


class Entity(BaseModel):
    model_config = ConfigDict(frozen=True)

    noun: str
    attributes: Tuple[str, ...] = ()
    count: int = 1


class Relation(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject: int        # entity index
    relation: str
    object: int


class SceneAST(BaseModel):
    model_config = ConfigDict(frozen=True)

    entities: Tuple[Entity, ...]
    relations: Tuple[Relation, ...] = ()
    background: Optional[str] = None


class ShapeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str
    color: str
    center: Tuple[float, float]   # pixels (x, y)
    size: float                   # side of the bounding square, pixels
    depth: int
    entity: int = 0               # index of the caption entity this shape belongs to


class ShapeScene(BaseModel):
    model_config = ConfigDict(frozen=True)

    shapes: Tuple[ShapeSpec, ...]
    background_color: str = DEFAULT_BACKGROUND
    canvas_size: int = 32
    relations: Tuple[Relation, ...] = ()
    mention_background: bool = False


class GrammarConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_count: int = Field(6, ge=1, le=6)
    max_entities: int = Field(2, ge=1, le=3)
    relations: Tuple[str, ...] = tuple(RELATIONS)
    single_object_prob: float = Field(0.3, ge=0.0, le=1.0)
    relation_prob: float = Field(0.6, ge=0.0, le=1.0)
    mention_background_prob: float = Field(0.5, ge=0.0, le=1.0)
    canvas_size: int = 32
    min_size: int = 8
    max_size: int = 14
    max_retries: int = 50


class GuidanceConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    t_p: float = Field(0.91, gt=0.0, lt=1.0)
    n_sc: int = Field(3, ge=0)
    ratio_base: float = Field(0.5, ge=0.0, le=1.0)
    num_steps: int = Field(28, ge=1)
    master_seed: int = 0
    reinforce: bool = True
    spatial_control: bool = True
    schedule_kind: ScheduleKind = "rectified_flow"
    cfg_scale: float = Field(1.0, ge=0.0)          # 1.0 disables guidance
    object_source: Literal["model", "render"] = "model"

    @model_validator(mode="after")
    def _check_window(self):
        if self.n_sc > self.num_steps:
            raise ValueError(f"n_sc ({self.n_sc}) exceeds num_steps ({self.num_steps})")
        return self


class RunConfig(GuidanceConfig):
    planner: Literal["rule", "llm"] = "rule"
    checkpoint_path: str = "checkpoints/toy_dit.ckpt"
    corpus_path: Optional[str] = None
    output_dir: str = "runs"
    offline: bool = False
    canvas_size: int = 32


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    depth: int = Field(6, ge=1)
    width: int = Field(128, ge=4)
    heads: int = Field(4, ge=1)
    ff_mult: int = 4
    max_text_len: int = 24
    canvas_size: int = 32
    patch_size: int = 2

    @model_validator(mode="after")
    def _check_heads(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.canvas_size % self.patch_size != 0:
            raise ValueError("canvas_size must be a multiple of patch_size")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = 0
    steps: int = Field(20000, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(3e-4, ge=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    grad_clip: float = 1.0
    caption_dropout: float = Field(0.1, ge=0.0, le=1.0)
    schedule_kind: ScheduleKind = "rectified_flow"
    log_every: int = 100
    overfit_samples: Optional[int] = None
    model: ModelConfig = ModelConfig()


class LlmConfig(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4.1"
    api_key_env_var_name: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_retries: int = Field(2, ge=0)
    timeout_seconds: float = Field(60.0, gt=0.0)
    retry_backoff_seconds: float = Field(0.5, ge=0.0)
    max_tokens: int = 2048
    offline: bool = False
    fixtures_dir: str = "fixtures/llm"


class PlannerTranscript(BaseModel):
    prompt: str
    request_text: str
    raw_response_text: str = ""
    reasoning_text: str = ""
    responses: List[str] = []
    parsed_layout: Optional[SemanticLayout] = None
    repair_attempts: int = 0
    clamped_fields: List[str] = []


class ExpectedEntity(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str
    color: Optional[str] = None
    count: int = 1


class ExpectedRelation(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject: int
    relation: str
    object: int


class Expectations(BaseModel):
    model_config = ConfigDict(frozen=True)

    entities: Tuple[ExpectedEntity, ...]
    relations: Tuple[ExpectedRelation, ...] = ()


class PromptCase(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    prompt: str
    category: Literal["spatial", "count", "3d"]
    expectations: Expectations


class StepSummary(BaseModel):
    index: int
    t: float
    t_next: float
    mode: Literal["spatial", "plain"]
    reinforced: bool
    skipped_regions: List[Optional[int]] = []
    latent_rms: float


class SuiteEntry(BaseModel):
    case_id: str
    prompt: str
    category: str
    prior_score: Optional[float] = None
    final_score: float
    run_dir: Optional[str] = None


class SuiteReport(BaseModel):
    entries: List[SuiteEntry]
    category_means: Dict[str, Dict[str, float]]     # {"final": {...}, "prior": {...}}
    breakdown: Dict[str, Dict[str, int]] = {}       # category -> prior/final correctness counts
    config_hash: str = ""
    run_dirs: List[str] = []


class AblationRow(BaseModel):
    reinforce: bool
    spatial_control: bool
    category_means: Dict[str, float]


def config_hash(config) -> str:
    """sha256 of the canonical (sorted-keys) JSON of a config model or dict."""
    payload = config.model_dump(mode="json") if isinstance(config, BaseModel) else config
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
