#!/usr/bin/env python3
"""
Command line for the whole pipeline.

Usage:
    python cli.py gen-data --seed 7 --n 5000
    python cli.py train --steps 20000
    python cli.py plan "a red circle to the left of a blue square"
    python cli.py generate "a red circle to the left of a blue square" --seed 3
    python cli.py make-suite --n-per-category 50 --out suites/bench.jsonl
    python cli.py eval --suite suites/bench.jsonl --runs runs/bench --generate
    python cli.py ablate --suite suites/bench.jsonl --out runs/ablation
    python cli.py sweep --suite suites/bench.jsonl --param t_p --values 0.5 0.7 0.91 0.99

Exit codes: 0 success, 1 pipeline error or failed gate, 2 missing input.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import torch
from pydantic import ValidationError

# Add parent directory for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from compositor import build_composite_prior, save_prior
from config import Config, configure_logging
from database import SessionLocal, init_db, record_run, record_transcript
from dataset import generate_corpus, load_corpus, sample_scene, write_corpus
from dit_model import build_model
from errors import ComposeError, MissingRunError
from evaluation import (
    build_benchmark_suite, evaluate_suite, format_ablation, format_report, gate_failures, load_suite,
    run_ablation, run_suite, sweep_n_sc, sweep_t_p, write_report, write_suite,
)
from layout import layout_to_dict, save_layout
from llm_client import judge_3d, llm_planner
from models import GrammarConfig, LlmConfig, ModelConfig, RunConfig, TrainConfig, config_hash
from prior_guided import generate, rule_planner, run_dir_name
from sampler import derive_seed
from schedules import NoiseSchedule
from shape_detector import qualify_detector
from trainer import evaluate_loss, load_checkpoint, train

EXIT_OK, EXIT_FAILED, EXIT_MISSING = 0, 1, 2
QUALIFICATION_GATE = 0.99


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingRunError([str(path)], f"{what} not found: {path}")
    return path


def _llm_config(args) -> LlmConfig:
    return LlmConfig(
        endpoint_url=Config.LLM_ENDPOINT_URL,
        model_name=Config.LLM_MODEL,
        api_key_env_var_name=Config.LLM_API_KEY_ENV,
        fixtures_dir=Config.LLM_FIXTURES_DIR,
        offline=bool(getattr(args, "offline", False) or Config.LLM_OFFLINE),
    )


def _planner(args, canvas_size: int):
    if args.planner == "llm":
        return llm_planner(_llm_config(args), canvas_size, Config.PATCH_SIZE)
    return rule_planner(canvas_size, Config.PATCH_SIZE)


def _run_config(args, schedule: NoiseSchedule) -> RunConfig:
    return RunConfig(
        t_p=args.t_p, n_sc=args.n_sc, ratio_base=args.ratio_base,
        num_steps=args.steps if args.steps is not None else schedule.num_steps,
        master_seed=args.seed, reinforce=not args.no_reinforce, spatial_control=not args.no_spatial_control,
        schedule_kind=schedule.kind, cfg_scale=args.cfg_scale, object_source=args.object_source,
        planner=args.planner, checkpoint_path=str(args.checkpoint), output_dir=str(args.out or Config.RUNS_DIR),
        offline=bool(getattr(args, "offline", False)), canvas_size=Config.CANVAS_SIZE,
    )


def _load_model(args):
    _require(args.checkpoint, "checkpoint")
    model, schedule, _ = load_checkpoint(args.checkpoint)
    return model, schedule


def _case_runner(model, schedule, planner, planner_name):
    def run_case(case, run_dir, config):
        generate(case.prompt, model, planner, config, schedule, run_dir=run_dir, planner_name=planner_name)
    return run_case


# ================== Commands ==================

def cmd_gen_data(args) -> int:
    grammar = GrammarConfig(max_count=args.max_count, canvas_size=Config.CANVAS_SIZE)
    seeds = [derive_seed(args.seed, f"corpus-{args.split}", i) for i in range(args.n)]
    print(f"🧩 Generating {args.n} scenes (seed {args.seed})...")
    samples = generate_corpus(seeds, grammar, show_progress=True)
    root = write_corpus(args.out, args.split, samples)
    print(f"   ✅ Wrote {len(samples)} samples to {root}")

    if args.qualify:
        result = qualify_detector(sample_scene(seed, grammar) for seed in seeds)
        print(f"🔎 Detector precision {result.precision:.4f}, recall {result.recall:.4f}")
        if min(result.precision, result.recall) < QUALIFICATION_GATE:
            print(f"❌ Detector below the {QUALIFICATION_GATE:.0%} qualification gate", file=sys.stderr)
            return EXIT_FAILED
    return EXIT_OK


def cmd_train(args) -> int:
    corpus_root = _require(args.corpus, "corpus")
    corpus = load_corpus(corpus_root, args.split, limit=args.limit)
    model_config = ModelConfig(depth=args.depth, width=args.width, heads=args.heads,
                               canvas_size=Config.CANVAS_SIZE, patch_size=Config.PATCH_SIZE)
    train_config = TrainConfig(seed=args.seed, steps=args.train_steps, batch_size=args.batch_size, lr=args.lr,
                               schedule_kind=args.schedule, overfit_samples=args.overfit, model=model_config)

    start_step = 0
    if args.resume:
        model, _, header = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        start_step = int(header.get("step", 0))
        print(f"🔁 Resuming from step {start_step}")
    else:
        model = build_model(model_config, args.seed)

    schedule = NoiseSchedule(kind=args.schedule)
    samples = corpus[:args.overfit] if args.overfit else corpus
    initial = evaluate_loss(model, samples, schedule, seed=args.seed)
    print(f"🏋️  Training {model.parameter_count()} parameters on {len(corpus)} samples (initial loss {initial:.4f})")
    result = train(model, corpus, train_config, checkpoint_path=args.checkpoint, start_step=start_step)
    final = evaluate_loss(result.model, samples, schedule, seed=args.seed)
    print(f"   ✅ Saved {result.checkpoint_path} at step {result.step} (loss {final:.4f})")

    if args.overfit and final >= 0.1 * initial:
        print(f"❌ Overfit gate failed: {final:.4f} >= 10% of {initial:.4f}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_plan(args) -> int:
    layout, transcript = _planner(args, Config.CANVAS_SIZE)(args.prompt)
    document = json.dumps(layout_to_dict(layout), indent=2, sort_keys=True)
    if args.out:
        save_layout(layout, args.out)
        print(f"✅ Layout written to {args.out}")
    else:
        print(document)
    if transcript is not None and transcript.clamped_fields:
        print(f"⚠️  Clamped: {', '.join(transcript.clamped_fields)}")
    return EXIT_OK


def cmd_build_prior(args) -> int:
    layout, _ = _planner(args, Config.CANVAS_SIZE)(args.prompt)
    model = schedule = None
    if args.object_source == "model":
        model, schedule = _load_model(args)
    prior = build_composite_prior(layout, args.seed, args.object_source, model=model, schedule=schedule)
    out = save_prior(prior, args.out)
    print(f"✅ Composite prior for {len(layout.objects)} objects written to {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    model, schedule = _load_model(args)
    config = _run_config(args, schedule)
    run_dir = Path(args.out) / (args.name or run_dir_name(args.prompt, args.seed))
    print(f"🎨 Generating {args.prompt!r} (seed {args.seed}, planner {args.planner})")
    _, record = generate(args.prompt, model, _planner(args, Config.CANVAS_SIZE), config, schedule,
                         run_dir=run_dir, planner_name=args.planner)
    print(f"   ✅ Run written to {record.run_dir}")

    if args.register:
        init_db()
        session = SessionLocal()
        try:
            record_run(session, run_dir.name, args.prompt, str(run_dir), args.planner, args.seed,
                       config.model_dump(mode="json"), config_hash(config))
            if record.transcript is not None:
                record_transcript(session, record.transcript)
        finally:
            session.close()
        print("   ✅ Registered in the run index")
    return EXIT_OK


def _parse_gates(items):
    gates = {}
    for item in items or []:
        category, _, value = item.partition("=")
        gates[category] = float(value)
    return gates


def cmd_eval(args) -> int:
    cases = load_suite(_require(args.suite, "suite"))
    if args.generate:
        model, schedule = _load_model(args)
        config = _run_config(args, schedule)
        run_case = _case_runner(model, schedule, _planner(args, Config.CANVAS_SIZE), args.planner)
        run_suite(cases, args.runs, lambda case, run_dir: run_case(case, run_dir, config))
    report = evaluate_suite(cases, args.runs)
    json_path, text_path = write_report(report, args.out or args.runs)
    print(format_report(report))
    print(f"✅ Report written to {json_path} and {text_path}")

    failures = gate_failures(report, _parse_gates(args.gate))
    for failure in failures:
        print(f"❌ Gate failed: {failure}", file=sys.stderr)
    return EXIT_FAILED if failures else EXIT_OK


def cmd_ablate(args) -> int:
    cases = load_suite(_require(args.suite, "suite"))
    model, schedule = _load_model(args)
    config = _run_config(args, schedule)
    run_case = _case_runner(model, schedule, _planner(args, Config.CANVAS_SIZE), args.planner)
    out = Path(args.out)

    rows = run_ablation(cases, config, out, run_case)
    table = format_ablation(rows)
    document = {"switches": [row.model_dump() for row in rows]}

    if args.ratios:
        document["ratio_base"] = {}
        for ratio in args.ratios:
            ratio_config = config.model_copy(update={"ratio_base": ratio})
            root = out / f"ratio_base-{ratio:g}"
            run_suite(cases, root, lambda case, run_dir: run_case(case, run_dir, ratio_config))
            document["ratio_base"][f"{ratio:g}"] = evaluate_suite(cases, root).category_means["final"]

    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(document, indent=2, sort_keys=True))
    (out / "ablation.txt").write_text(table)
    print(table)
    print(f"✅ Ablation written to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cases = load_suite(_require(args.suite, "suite"))
    model, schedule = _load_model(args)
    config = _run_config(args, schedule)
    run_case = _case_runner(model, schedule, _planner(args, Config.CANVAS_SIZE), args.planner)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.param == "t_p":
        values = args.values or [0.5, 0.7, 0.91, 0.99]
        result = sweep_t_p(cases, config, out, run_case, values)
        document = result.to_dict()
        print(f"📈 t_p {result.values} -> mean distance {[round(v, 4) for v in result.mean_curve()]}")
        print(f"   Spearman {result.spearman:.3f}")
        failed = args.min_spearman is not None and not result.spearman >= args.min_spearman
    else:
        values = [int(v) for v in (args.values or [0, 1, 3, 6])]
        document = {"values": values, "category_means": sweep_n_sc(cases, config, out, run_case, values)}
        print(json.dumps(document, indent=2, sort_keys=True))
        failed = False

    (out / f"sweep_{args.param}.json").write_text(json.dumps(document, indent=2, sort_keys=True))
    if failed:
        print(f"❌ Spearman below {args.min_spearman}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_make_suite(args) -> int:
    cases = build_benchmark_suite(args.n_per_category, args.seed)
    path = write_suite(args.out, cases)
    print(f"✅ Wrote {len(cases)} prompts to {path}")
    return EXIT_OK


def cmd_judge(args) -> int:
    score = judge_3d(_require(args.image, "image"), args.prompt, _llm_config(args))
    print(score)
    return EXIT_OK


# ================== Parser ==================

def _positive_int(value: str) -> int:
    number = int(value)
    if number <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def _add_guidance(parser):
    parser.add_argument('--checkpoint', default=Config.CHECKPOINT_PATH)
    parser.add_argument('--planner', choices=['rule', 'llm'], default='rule')
    parser.add_argument('--offline', action='store_true', help='Serve LLM answers from fixtures only')
    parser.add_argument('--seed', type=int, default=0, help='Master seed')
    parser.add_argument('--t-p', dest='t_p', type=float, default=0.91)
    parser.add_argument('--n-sc', dest='n_sc', type=int, default=3)
    parser.add_argument('--ratio-base', dest='ratio_base', type=float, default=0.5)
    parser.add_argument('--steps', type=int, default=None, help='Denoising steps (default: checkpoint schedule)')
    parser.add_argument('--cfg-scale', dest='cfg_scale', type=float, default=1.0)
    parser.add_argument('--object-source', dest='object_source', choices=['model', 'render'], default='model')
    parser.add_argument('--no-reinforce', dest='no_reinforce', action='store_true')
    parser.add_argument('--no-spatial-control', dest='no_spatial_control', action='store_true')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Compositional prior-guided toy diffusion')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='Generate the synthetic shapes corpus')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--n', type=_positive_int, required=True)
    p.add_argument('--out', default=Config.CORPUS_DIR)
    p.add_argument('--split', default='train')
    p.add_argument('--max-count', dest='max_count', type=int, default=6)
    p.add_argument('--qualify', action='store_true', help='Run the detector qualification gate')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('train', help='Train the toy diffusion model')
    p.add_argument('--corpus', default=Config.CORPUS_DIR)
    p.add_argument('--split', default='train')
    p.add_argument('--limit', type=int, default=None)
    p.add_argument('--checkpoint', default=Config.CHECKPOINT_PATH)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--steps', dest='train_steps', type=int, default=20000)
    p.add_argument('--batch-size', dest='batch_size', type=int, default=64)
    p.add_argument('--lr', type=float, default=3e-4)
    p.add_argument('--depth', type=int, default=6)
    p.add_argument('--width', type=int, default=128)
    p.add_argument('--heads', type=int, default=4)
    p.add_argument('--schedule', choices=['rectified_flow', 'ddim_cosine'], default='rectified_flow')
    p.add_argument('--overfit', type=int, default=None, help='Train on the first N samples and gate the loss')
    p.add_argument('--resume', action='store_true')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('plan', help='Print the layout for a prompt')
    p.add_argument('prompt')
    p.add_argument('--planner', choices=['rule', 'llm'], default='rule')
    p.add_argument('--offline', action='store_true')
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser('build-prior', help='Build and save the composite prior for a prompt')
    p.add_argument('prompt')
    p.add_argument('--planner', choices=['rule', 'llm'], default='rule')
    p.add_argument('--offline', action='store_true')
    p.add_argument('--checkpoint', default=Config.CHECKPOINT_PATH)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--object-source', dest='object_source', choices=['model', 'render'], default='model')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_build_prior)

    p = sub.add_parser('generate', help='Run the full pipeline for one prompt')
    p.add_argument('prompt')
    _add_guidance(p)
    p.add_argument('--out', default=Config.RUNS_DIR)
    p.add_argument('--name', default=None, help='Run directory name')
    p.add_argument('--register', action='store_true', help='Record the run in the run index')
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser('eval', help='Score run directories against a prompt suite')
    p.add_argument('--suite', required=True)
    p.add_argument('--runs', required=True, help='Root holding one run directory per case id')
    p.add_argument('--out', default=None)
    p.add_argument('--generate', action='store_true', help='Generate the runs first')
    p.add_argument('--gate', action='append', metavar='CATEGORY=MIN', help='Fail when a final mean is below MIN')
    _add_guidance(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('ablate', help='Reinforcement x spatial-control grid')
    p.add_argument('--suite', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--ratios', type=float, nargs='*', default=None, help='Also sweep ratio_base over these values')
    _add_guidance(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser('sweep', help='Sweep t_p or N_sc')
    p.add_argument('--suite', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--param', choices=['t_p', 'n_sc'], default='t_p')
    p.add_argument('--values', type=float, nargs='*', default=None)
    p.add_argument('--min-spearman', dest='min_spearman', type=float, default=None)
    _add_guidance(p)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('make-suite', help='Write a synthetic benchmark suite')
    p.add_argument('--n-per-category', dest='n_per_category', type=_positive_int, default=50)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_make_suite)

    p = sub.add_parser('judge', help='Score an image with the LLM 3D judge')
    p.add_argument('image')
    p.add_argument('prompt')
    p.add_argument('--offline', action='store_true')
    p.set_defaults(handler=cmd_judge)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    if Config.TORCH_THREADS:
        torch.set_num_threads(Config.TORCH_THREADS)
    try:
        return args.handler(args)
    except (MissingRunError, FileNotFoundError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValidationError as exc:
        print(f"❌ invalid settings: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ComposeError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
