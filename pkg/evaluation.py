"""
Metric harness: per-image scores, prompt suites, reports, the ablation grid
and the t_p / N_sc sweeps.

Run directories are read back through the files written by
prior_guided.save_run, so scoring never needs the original command line.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr
from tqdm import tqdm

from dataset import read_png
from errors import MissingRunError
from models import (
    CATEGORIES, COLORS, OCCLUSION_RELATIONS, SHAPES, SPATIAL_2D_RELATIONS, AblationRow, Entity,
    ExpectedEntity, ExpectedRelation, Expectations, GuidanceConfig, PromptCase, Relation, SceneAST,
    SuiteEntry, SuiteReport, config_hash,
)
from prompt_dsl import parse_prompt_dsl, render_ast
from shape_detector import Detection, detect_shapes, largest

logger = logging.getLogger(__name__)

CENTER_MARGIN = 1.0
ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))   # (reinforce, spatial control)
SWEEP_T_P = (0.5, 0.7, 0.91, 0.99)


# ================== Expectations ==================

def expectations_from_ast(ast: SceneAST) -> Expectations:
    return Expectations(
        entities=tuple(ExpectedEntity(kind=e.noun, color=e.attributes[0] if e.attributes else None, count=e.count)
                       for e in ast.entities),
        relations=tuple(ExpectedRelation(subject=r.subject, relation=r.relation, object=r.object)
                        for r in ast.relations),
    )


def expectations_from_prompt(prompt: str) -> Expectations:
    return expectations_from_ast(parse_prompt_dsl(prompt))


def _find(detections: Sequence[Detection], entity: ExpectedEntity) -> Optional[Detection]:
    return largest(detections, entity.kind, entity.color)


# ================== Scores ==================

def _relation_holds(subject: Detection, obj: Detection, relation: str, margin: float) -> bool:
    (sx, sy), (ox, oy) = subject.center, obj.center
    if relation == "left of":
        return ox - sx >= margin
    if relation == "right of":
        return sx - ox >= margin
    if relation in ("above", "on top of"):
        return oy - sy >= margin
    if relation == "below":
        return sy - oy >= margin
    raise ValueError(f"{relation!r} is not a 2D relation")


def spatial_score(detections: Sequence[Detection], expected: Expectations, margin: float = CENTER_MARGIN) -> float:
    relations = [r for r in expected.relations if r.relation in SPATIAL_2D_RELATIONS]
    if not relations:
        return float(all(_find(detections, e) is not None for e in expected.entities))
    total = 0.0
    for relation in relations:
        subject = _find(detections, expected.entities[relation.subject])
        obj = _find(detections, expected.entities[relation.object])
        if subject is not None and obj is not None and _relation_holds(subject, obj, relation.relation, margin):
            total += 1.0
    return total / len(relations)


def count_score(detections: Sequence[Detection], expected: Expectations) -> float:
    scores = []
    for entity in expected.entities:
        found = sum(1 for d in detections if d.kind == entity.kind and (entity.color is None or d.color == entity.color))
        if found == entity.count:
            scores.append(1.0)
        else:
            scores.append(max(0.0, 1.0 - abs(found - entity.count) / entity.count))
    return float(np.mean(scores)) if scores else 0.0


def occlusion_pair(expected: Expectations) -> Tuple[ExpectedEntity, ExpectedEntity]:
    """(front, back) entities named by the first occlusion relation."""
    for relation in expected.relations:
        if relation.relation in OCCLUSION_RELATIONS:
            subject = expected.entities[relation.subject]
            obj = expected.entities[relation.object]
            return (subject, obj) if relation.relation == "in front of" else (obj, subject)
    raise ValueError("expectations name no occlusion relation")


def _hidden_by(back: Detection, front: Detection) -> int:
    """Pixels of back's fitted shape that are not visible and are covered by front."""
    return int((back.template & ~back.mask & front.mask).sum())


def occlusion_score(image_or_detections, expected_front: ExpectedEntity, expected_back: ExpectedEntity,
                    min_evidence: int = 2) -> int:
    """
    0 when either entity is missing or the back entity covers the front one,
    2 when the front entity hides part of the back one, 1 otherwise.
    """
    if isinstance(image_or_detections, np.ndarray):
        detections = detect_shapes(image_or_detections)
    else:
        detections = list(image_or_detections)
    front = _find(detections, expected_front)
    back = _find(detections, expected_back)
    if front is None or back is None:
        return 0
    hidden_back = _hidden_by(back, front)
    hidden_front = _hidden_by(front, back)
    if hidden_back >= min_evidence and hidden_back > hidden_front:
        return 2
    if hidden_front >= min_evidence and hidden_front > hidden_back:
        return 0
    return 1


def normalize_3d(scores: Sequence[int]) -> float:
    """0/1/2 rubric scores as a 0-100 suite score."""
    if not scores:
        raise ValueError("no scores to normalize")
    return sum(scores) / (2.0 * len(scores)) * 100.0


def score_image(image: np.ndarray, case: PromptCase) -> float:
    """Score in [0, 1] for the case's category; 3d scores are the rubric value / 2."""
    detections = detect_shapes(image)
    if case.category == "spatial":
        return spatial_score(detections, case.expectations)
    if case.category == "count":
        return count_score(detections, case.expectations)
    front, back = occlusion_pair(case.expectations)
    return occlusion_score(detections, front, back) / 2.0


def foreground_distance(final: np.ndarray, prior: np.ndarray, union_mask: np.ndarray) -> float:
    """Mean per-pixel RGB distance between final image and composite prior inside the union mask."""
    union_mask = np.asarray(union_mask, dtype=bool)
    if not union_mask.any():
        return 0.0
    diff = np.linalg.norm(np.asarray(final, np.float32) - np.asarray(prior, np.float32), axis=-1)
    return float(diff[union_mask].mean())


# ================== Suites ==================

def load_suite(path) -> List[PromptCase]:
    """JSON-lines {prompt, category[, id][, expectations]}; expectations default to the parsed prompt."""
    cases = []
    for number, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        item = json.loads(line)
        item.setdefault("id", f"case-{number:03d}")
        if "expectations" not in item:
            item["expectations"] = expectations_from_prompt(item["prompt"]).model_dump()
        cases.append(PromptCase(**item))
    return cases


def write_suite(path, cases: Sequence[PromptCase]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(case.model_dump_json() + "\n" for case in cases))
    return path


def _pick_pair(rng: np.random.Generator):
    kinds = rng.choice(len(SHAPES), size=2, replace=True)
    colors = rng.choice(len(COLORS), size=2, replace=False)
    return [(SHAPES[int(k)], COLORS[int(c)]) for k, c in zip(kinds, colors)]


def build_benchmark_suite(n_per_category: int, seed: int = 0,
                          categories: Sequence[str] = tuple(CATEGORIES)) -> List[PromptCase]:
    """Synthetic benchmark: 2D relations, counts and occlusion prompts over drawable shapes."""
    rng = np.random.default_rng(seed)
    cases = []
    for category in categories:
        for index in range(n_per_category):
            pair = _pick_pair(rng)
            if category == "spatial":
                relation = ("left of", "right of", "above", "below")[int(rng.integers(4))]
                ast = SceneAST(entities=tuple(Entity(noun=k, attributes=(c,)) for k, c in pair),
                               relations=(Relation(subject=0, relation=relation, object=1),))
            elif category == "count":
                if rng.random() < 0.5:
                    ast = SceneAST(entities=(Entity(noun=pair[0][0], attributes=(pair[0][1],),
                                                    count=int(rng.integers(1, 5))),))
                else:
                    ast = SceneAST(
                        entities=tuple(Entity(noun=k, attributes=(c,), count=int(rng.integers(1, 4))) for k, c in pair),
                        relations=(Relation(subject=0, relation=("left of", "above")[int(rng.integers(2))], object=1),),
                    )
            elif category == "3d":
                relation = sorted(OCCLUSION_RELATIONS)[int(rng.integers(len(OCCLUSION_RELATIONS)))]
                ast = SceneAST(entities=tuple(Entity(noun=k, attributes=(c,)) for k, c in pair),
                               relations=(Relation(subject=0, relation=relation, object=1),))
            else:
                raise ValueError(f"unknown category {category!r}")
            cases.append(PromptCase(id=f"{category}-{index:03d}", prompt=render_ast(ast), category=category,
                                    expectations=expectations_from_ast(ast)))
    return cases


# ================== Suite runs ==================

def run_suite(cases: Sequence[PromptCase], runs_root, run_case: Callable[[PromptCase, Path], None],
              show_progress: bool = True) -> List[Path]:
    """Create <runs_root>/<case id> for every case through run_case(case, run_dir)."""
    runs_root = Path(runs_root)
    dirs = []
    for case in tqdm(cases, desc="generate", disable=not show_progress):
        run_dir = runs_root / case.id
        run_case(case, run_dir)
        dirs.append(run_dir)
    return dirs


def _run_config_hash(run_dir: Path) -> Optional[str]:
    record = run_dir / "record.json"
    if record.is_file():
        return json.loads(record.read_text()).get("config_hash")
    return None


def evaluate_suite(cases: Sequence[PromptCase], runs_root, run_dirs: Optional[Mapping[str, Path]] = None) -> SuiteReport:
    """
    Score the prior and final image of every case's run directory.

    Directories default to <runs_root>/<case id>. Category means are on a
    0-100 scale; breakdown counts (prior correct, final correct) pairs.
    """
    if not cases:
        raise MissingRunError([], "refusing to build a report for an empty prompt set")
    runs_root = Path(runs_root)
    dirs = {case.id: Path(run_dirs[case.id]) if run_dirs else runs_root / case.id for case in cases}
    missing = sorted(str(d) for d in dirs.values() if not (d / "final.png").is_file())
    if missing:
        raise MissingRunError(missing)

    entries = []
    for case in cases:
        run_dir = dirs[case.id]
        prior_path = run_dir / "prior.png"
        prior_score = score_image(read_png(prior_path), case) if prior_path.is_file() else None
        entries.append(SuiteEntry(case_id=case.id, prompt=case.prompt, category=case.category,
                                  prior_score=prior_score, final_score=score_image(read_png(run_dir / "final.png"), case),
                                  run_dir=str(run_dir)))

    final_means, prior_means, breakdown = {}, {}, {}
    for category in CATEGORIES:
        group = [e for e in entries if e.category == category]
        if not group:
            continue
        final_means[category] = float(np.mean([e.final_score for e in group])) * 100.0
        priors = [e.prior_score for e in group if e.prior_score is not None]
        if priors:
            prior_means[category] = float(np.mean(priors)) * 100.0
        counts = {"both": 0, "prior_only": 0, "final_only": 0, "neither": 0}
        for e in group:
            p, f = e.prior_score == 1.0, e.final_score == 1.0
            counts["both" if p and f else "prior_only" if p else "final_only" if f else "neither"] += 1
        breakdown[category] = counts

    hashes = sorted({h for h in (_run_config_hash(d) for d in dirs.values()) if h})
    return SuiteReport(
        entries=entries,
        category_means={"final": final_means, "prior": prior_means},
        breakdown=breakdown,
        config_hash=hashes[0] if len(hashes) == 1 else config_hash({"runs": hashes}),
        run_dirs=[str(dirs[case.id]) for case in cases],
    )


def format_report(report: SuiteReport) -> str:
    rows = [("category", "prior", "final", "n", "both", "prior_only", "final_only", "neither")]
    for category in CATEGORIES:
        if category not in report.category_means["final"]:
            continue
        prior = report.category_means["prior"].get(category)
        counts = report.breakdown.get(category, {})
        rows.append((
            category,
            f"{prior:.2f}" if prior is not None else "-",
            f"{report.category_means['final'][category]:.2f}",
            str(sum(1 for e in report.entries if e.category == category)),
            *(str(counts.get(k, 0)) for k in ("both", "prior_only", "final_only", "neither")),
        ))
    return _table(rows) + f"\nconfig {report.config_hash[:12]}\n"


def _table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)


def write_report(report: SuiteReport, directory, name: str = "report") -> Tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / f"{name}.json"
    text_path = directory / f"{name}.txt"
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True))
    text_path.write_text(format_report(report))
    return json_path, text_path


def gate_failures(report: SuiteReport, gates: Mapping[str, float]) -> List[str]:
    """Categories whose final mean is below its gate (missing categories fail)."""
    failures = []
    for category, minimum in sorted(gates.items()):
        value = report.category_means["final"].get(category)
        if value is None or value < minimum:
            failures.append(f"{category}: {value if value is not None else 'missing'} < {minimum}")
    return failures


# ================== Ablation and sweeps ==================

RunCase = Callable[[PromptCase, Path, GuidanceConfig], None]


def run_ablation(cases: Sequence[PromptCase], base_config: GuidanceConfig, runs_root, run_case: RunCase,
                 grid: Sequence[Tuple[bool, bool]] = ABLATION_GRID,
                 show_progress: bool = True) -> List[AblationRow]:
    """One suite run per (reinforce, spatial control) switch pair, same seeds and checkpoint."""
    rows = []
    runs_root = Path(runs_root)
    for reinforce, spatial in grid:
        config = base_config.model_copy(update={"reinforce": reinforce, "spatial_control": spatial})
        root = runs_root / f"reinforce-{int(reinforce)}_sc-{int(spatial)}"
        run_suite(cases, root, lambda case, run_dir: run_case(case, run_dir, config), show_progress)
        report = evaluate_suite(cases, root)
        rows.append(AblationRow(reinforce=reinforce, spatial_control=spatial,
                                category_means=report.category_means["final"]))
        logger.info("ablation reinforce=%s spatial=%s: %s", reinforce, spatial, report.category_means["final"])
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    categories = [c for c in CATEGORIES if any(c in row.category_means for row in rows)]
    table = [("reinforce", "spatial_control", *categories)]
    for row in rows:
        table.append(("on" if row.reinforce else "off", "on" if row.spatial_control else "off",
                      *(f"{row.category_means[c]:.2f}" if c in row.category_means else "-" for c in categories)))
    return _table(table) + "\n"


@dataclass
class SweepResult:
    values: List[float]
    distances: Dict[str, List[float]] = field(default_factory=dict)   # case id -> distance per value
    spearman: float = float("nan")

    def mean_curve(self) -> List[float]:
        return [float(np.mean([d[i] for d in self.distances.values()])) for i in range(len(self.values))]

    def to_dict(self) -> dict:
        return {"values": self.values, "distances": self.distances, "mean": self.mean_curve(),
                "spearman": self.spearman}


def fidelity_correlation(values: Sequence[float], distances: Mapping[str, Sequence[float]]) -> float:
    """Mean over prompts of the Spearman correlation between the swept value and the distance."""
    rhos = []
    for series in distances.values():
        if np.ptp(series) == 0:
            continue
        rho = spearmanr(values, series).correlation
        if np.isfinite(rho):
            rhos.append(float(rho))
    return float(np.mean(rhos)) if rhos else float("nan")


def sweep_t_p(cases: Sequence[PromptCase], base_config: GuidanceConfig, runs_root, run_case: RunCase,
              values: Sequence[float] = SWEEP_T_P, show_progress: bool = True) -> SweepResult:
    """Final-to-prior foreground distance per t_p; a weaker prior should drift further."""
    result = SweepResult(values=list(values))
    runs_root = Path(runs_root)
    for value in values:
        config = base_config.model_copy(update={"t_p": value})
        root = runs_root / f"t_p-{value:g}"
        for run_dir, case in zip(run_suite(cases, root, lambda c, d: run_case(c, d, config), show_progress), cases):
            distance = foreground_distance(read_png(run_dir / "final.png"), read_png(run_dir / "prior.png"),
                                           read_png(run_dir / "union_mask.png", mask=True))
            result.distances.setdefault(case.id, []).append(distance)
    result.spearman = fidelity_correlation(result.values, result.distances)
    logger.info("t_p sweep: mean distances %s, spearman %.3f", result.mean_curve(), result.spearman)
    return result


def sweep_n_sc(cases: Sequence[PromptCase], base_config: GuidanceConfig, runs_root, run_case: RunCase,
               values: Sequence[int] = (0, 1, 3, 6), show_progress: bool = True) -> Dict[int, Dict[str, float]]:
    means = {}
    runs_root = Path(runs_root)
    for value in values:
        config = base_config.model_copy(update={"n_sc": value})
        root = runs_root / f"n_sc-{value}"
        run_suite(cases, root, lambda c, d: run_case(c, d, config), show_progress)
        means[int(value)] = evaluate_suite(cases, root).category_means["final"]
    return means
