"""
Command-line entry point for the driving-QA GRPO engine.

    python main.py score-data --questions q.jsonl --scores s.jsonl --out d.jsonl
    python main.py build-dataset --questions q.jsonl --frame-scores d.jsonl --out splits/
    python main.py train --config configs/desk.toml --train splits/train.jsonl --out runs/desk
    python main.py eval --checkpoint runs/desk/checkpoint_epoch5.joblib --split splits/hard.jsonl
    python main.py report --metrics runs/desk/metrics.jsonl --out runs/desk/report
    python main.py judge-check --judge http --judge-url http://localhost:8000/v1

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

from data_loader import DataLoader, read_jsonl_records
from services.evaluation_service import EvaluationService
from services.judge_service import JudgeRequest, judge_score, make_judge
from services.trainer_service import TrainerService
from utils.config import RunConfig, apply_overrides, config_to_dict, load_run_config
from utils.frame_scoring import SplitSpec, build_manifest, build_splits, score_frames
from utils.policy_model import Vocab, load_checkpoint
from utils.schemas import AnswerStyle, DrivingTask, TaskKind, group_into_frames
from utils.telemetry import pearson, report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

loader = DataLoader()


class CommandParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _comma_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _add_judge_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Run config file (.toml or .json)")
    parser.add_argument("--judge", choices=["mock", "http"], help="Judge backend (overrides [judge] backend)")
    parser.add_argument("--judge-url", help="Base URL of an OpenAI-compatible endpoint (overrides [judge] url)")


def build_parser() -> argparse.ArgumentParser:
    parser = CommandParser(prog="main.py", description="Frame-difficulty curation and GRPO training for driving QA")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = commands.add_parser("score-data", help="Compute per-frame difficulty scores")
    p.add_argument("--questions", type=Path, required=True, help="Questions JSONL")
    p.add_argument("--scores", type=Path, required=True, help="Per-sample scores JSONL")
    p.add_argument("--out", type=Path, required=True, help="Frame-scores JSONL to write")
    p.add_argument("--models", type=_comma_list, help="Comma-separated scoring models to keep (default: all)")
    p.add_argument("--jobs", type=int, default=1, help="Parallel workers for frame scoring")

    p = commands.add_parser("build-dataset", help="Build the train and hard splits from frame scores")
    p.add_argument("--questions", type=Path, required=True, help="Questions JSONL")
    p.add_argument("--frame-scores", type=Path, required=True, help="Frame-scores JSONL")
    p.add_argument("--hard-frame-scores", type=Path, help="Separate frame scores for the hard split")
    p.add_argument("--out", type=Path, required=True, help="Output directory for train.jsonl, hard.jsonl, manifest.json")
    p.add_argument("--train-range", type=float, nargs=2, metavar=("LO", "HI"), default=[25.0, 45.0], help="Training score range")
    p.add_argument("--hard-range", type=float, nargs=2, metavar=("LO", "HI"), default=[10.0, 31.0], help="Hard split score range")
    p.add_argument("--alpha", type=float, default=0.5, help="Action balancing target as a fraction of the largest class")
    p.add_argument("--seed", type=int, default=0, help="Seed for sampling and balancing")
    p.add_argument("--train-exclude", type=Path, action="append", default=[], help="Frame ids to keep out of training (repeatable)")
    p.add_argument("--hard-exclude", type=Path, action="append", default=[], help="Frame ids to keep out of the hard split (repeatable)")
    p.add_argument("--train-sample", type=int, help="Draw at most this many training frames before balancing")

    p = commands.add_parser("train", help="Run GRPO training")
    _add_judge_flags(p)
    p.add_argument("--train", type=Path, help="Training questions JSONL (overrides [dataset] train_path)")
    p.add_argument("--synthetic", action="store_true", help="Train on the built-in synthetic corpus")
    p.add_argument("--validation", type=Path, help="Validation questions JSONL (overrides [dataset] validation_path)")
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="Run directory for metrics and checkpoints")
    p.add_argument("--seed", type=int, help="Seed for initialization, shuffling and sampling")
    p.add_argument("--epochs", type=int, help="Number of epochs")
    p.add_argument("--batch", type=int, help="Prompts per step")
    p.add_argument("--group", type=int, help="Rollouts per prompt (G)")
    p.add_argument("--eval-every", type=int, help="Validate every N steps (0 = never)")
    p.add_argument("--no-progress", action="store_true", help="Hide the progress bar")

    p = commands.add_parser("eval", help="Evaluate a checkpoint on a split")
    _add_judge_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint written by train")
    p.add_argument("--split", type=Path, required=True, help="Questions JSONL to evaluate on")
    p.add_argument("--split-name", help="Name recorded in the report (default: file stem)")
    p.add_argument("--out", type=Path, help="Write the report JSON here as well as to stdout")
    p.add_argument("--seed", type=int, help="Seed for sampled decoding")
    p.add_argument("--repeats", type=int, help="Decoding passes to average")
    p.add_argument("--temperature", type=float, help="0 for greedy decoding")

    p = commands.add_parser("report", help="Summarize a metrics log as CSV series")
    p.add_argument("--metrics", type=Path, required=True, help="metrics.jsonl written by train")
    p.add_argument("--out", type=Path, required=True, help="Output directory")

    p = commands.add_parser("judge-check", help="Send one request to the configured judge")
    _add_judge_flags(p)
    p.add_argument("--task", choices=[t.value for t in DrivingTask], default=DrivingTask.BEHAVIOR.value, help="Task kind")
    p.add_argument("--style", choices=[s.value for s in AnswerStyle], help="Answer style (default: the task's usual style)")
    p.add_argument("--question", default="What is the ego vehicle doing?", help="Question text")
    p.add_argument("--reference", default="going straight", help="Reference answer")
    p.add_argument("--response", default="the ego vehicle is going straight", help="Response to score")
    p.add_argument("--agreement", type=Path, help="JSONL of {human, model} rows; prints their Pearson correlation")
    return parser


def _run_config(args: argparse.Namespace, grpo: Optional[dict] = None, policy: Optional[dict] = None) -> RunConfig:
    config = load_run_config(args.config)
    return apply_overrides(
        config,
        {
            "judge": {"backend": args.judge, "url": args.judge_url},
            "grpo": grpo or {},
            "policy": policy or {},
        },
    )


def cmd_score_data(args: argparse.Namespace) -> int:
    frames = group_into_frames(loader.load_questions(args.questions))
    table = loader.load_scores(args.scores, args.models)
    scores = score_frames(frames, table, n_jobs=args.jobs)
    loader.write_frame_scores(args.out, scores)
    logger.info(f"Wrote {len(scores)} frame scores to {args.out}")
    return EXIT_OK


def _exclusions(paths: Sequence[Path]) -> frozenset:
    ids = set()
    for path in paths:
        ids.update(loader.load_frame_ids(path))
    return frozenset(ids)


def cmd_build_dataset(args: argparse.Namespace) -> int:
    frames = loader.load_frames(args.questions)
    scores = loader.load_frame_scores(args.frame_scores)
    hard_scores = loader.load_frame_scores(args.hard_frame_scores) if args.hard_frame_scores else None
    train_spec = SplitSpec(
        lo=args.train_range[0],
        hi=args.train_range[1],
        exclusion_ids=_exclusions(args.train_exclude),
        balance_alpha=args.alpha,
        seed=args.seed,
        sample_size=args.train_sample,
    )
    hard_spec = SplitSpec(
        lo=args.hard_range[0],
        hi=args.hard_range[1],
        exclusion_ids=_exclusions(args.hard_exclude),
        balance_alpha=args.alpha,
        seed=args.seed,
    )
    train_frames, hard_frames = build_splits(frames, scores, train_spec, hard_spec, hard_scores)

    args.out.mkdir(parents=True, exist_ok=True)
    n_train = loader.write_questions(args.out / "train.jsonl", train_frames)
    n_hard = loader.write_questions(args.out / "hard.jsonl", hard_frames)
    manifest = build_manifest(train_spec, hard_spec, scores, train_frames, hard_frames, hard_scores)
    loader.write_json(args.out / "manifest.json", manifest)
    logger.info(f"Wrote {n_train} train and {n_hard} hard questions to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(
        args,
        grpo={
            "seed": args.seed,
            "epochs": args.epochs,
            "prompt_batch_size": args.batch,
            "group_size": args.group,
            "eval_every": args.eval_every,
        },
        policy={"seed": args.seed},
    )

    if args.synthetic:
        questions = loader.synthetic_corpus()
    else:
        train_path = args.train or config.dataset.train_path
        if train_path is None:
            raise ValueError("no training data: pass --train, --synthetic or set [dataset] train_path")
        questions = loader.load_questions(train_path, allow_copies=True)
    validation_path = args.validation or config.dataset.validation_path
    validation = loader.load_questions(validation_path, allow_copies=True) if validation_path else None

    vocab = Vocab.build(list(questions) + list(validation or []), config.policy.vocab_size)
    judge = make_judge(config.judge)
    args.out.mkdir(parents=True, exist_ok=True)
    loader.write_json(args.out / "config.json", config_to_dict(config))

    result = TrainerService(config, judge, vocab).train(
        questions,
        args.out,
        validation=validation,
        show_progress=not args.no_progress,
    )
    final = result.metrics[-1].mean_reward if result.metrics else None
    logger.info(f"Training finished: {len(result.metrics)} steps, final mean reward {final}, log {result.metrics_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args)
    checkpoint = load_checkpoint(args.checkpoint)
    questions = loader.load_questions(args.split, allow_copies=True)
    judge = make_judge(config.judge)
    evaluation = EvaluationService(judge, checkpoint.vocab).evaluate(
        questions,
        checkpoint.params,
        split_name=args.split_name or args.split.stem,
        temperature=config.grpo.eval_temperature if args.temperature is None else args.temperature,
        repeats=args.repeats or config.grpo.eval_repeats,
        seed=config.grpo.seed if args.seed is None else args.seed,
    )
    payload = evaluation.model_dump(mode="json")
    payload["overall_mean"] = evaluation.overall_mean
    if args.out:
        loader.write_json(args.out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    outputs = report(args.metrics, args.out)
    for name, path in outputs.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_judge_check(args: argparse.Namespace) -> int:
    config = _run_config(args)
    kind = DrivingTask(args.task)
    task = TaskKind(kind=kind, style=AnswerStyle(args.style)) if args.style else TaskKind.model_validate(kind.value)
    judge = make_judge(config.judge)
    request = JudgeRequest(task=task, question=args.question, reference_answer=args.reference, response=args.response)

    started = time.perf_counter()
    score = judge_score(request, judge)
    latency_ms = (time.perf_counter() - started) * 1000
    print(f"judge={judge.judge_id} score={score:g} latency_ms={latency_ms:.1f}")
    logger.info(f"Judge check passed: {judge.judge_id} scored {score:g} in {latency_ms:.1f} ms")

    if args.agreement:
        rows = [record for _, record in read_jsonl_records(args.agreement)]
        try:
            human = [float(row["human"]) for row in rows]
            model = [float(row["model"]) for row in rows]
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{args.agreement}: rows need numeric 'human' and 'model' fields") from e
        print(f"pearson={pearson(human, model):.6f} n={len(rows)}")
    return EXIT_OK


COMMANDS = {
    "score-data": cmd_score_data,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "judge-check": cmd_judge_check,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    load_dotenv()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
