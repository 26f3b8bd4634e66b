import json

import pytest

import data_loader
from helpers import question_row, write_jsonl
from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, run
from utils.schemas import group_into_frames

SMALL_RUN = {
    "policy": {"embed_dim": 4, "hidden_dim": 6, "context_window": 4, "max_len": 6},
    "grpo": {"epochs": 1, "group_size": 4, "prompt_batch_size": 16},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_RUN))
    return path


def _train(tmp_path, small_config, name, *extra):
    out = tmp_path / name
    argv = ["train", "--config", str(small_config), "--synthetic", "--seed", "7", "--out", str(out), "--no-progress"]
    assert run(argv + list(extra)) == EXIT_OK
    return out


def _lines_without_wall_time(path):
    records = [json.loads(line) for line in path.read_text().splitlines()]
    for record in records:
        record.pop("wall_ms")
    return records


def test_score_data_triple_mean(tmp_path):
    questions = write_jsonl(tmp_path / "q.jsonl", [question_row("q1", "f1"), question_row("q2", "f1")])
    scores = {"q1": {"m1": [40, 60], "m2": [20, 40]}, "q2": {"m1": [80, 100], "m2": [60, 80]}}
    rows = [
        {"question_id": q, "model_id": m, "sample_index": k, "score": s}
        for q, models in scores.items()
        for m, samples in models.items()
        for k, s in enumerate(samples)
    ]
    write_jsonl(tmp_path / "s.jsonl", rows)
    out = tmp_path / "d.jsonl"

    assert run(["score-data", "--questions", str(questions), "--scores", str(tmp_path / "s.jsonl"), "--out", str(out)]) == EXIT_OK
    assert [json.loads(line) for line in out.read_text().splitlines()] == [{"frame_id": "f1", "score": 60.0}]


def test_build_dataset_records_ranges(tmp_path):
    rows = [
        question_row("q1", "f1", task="behavior", action_label="going straight"),
        question_row("q2", "f2", task="behavior", action_label="going straight"),
        question_row("q3", "f3", task="behavior", action_label="steering to the right"),
        question_row("q4", "f4", task="behavior", action_label="going straight"),
    ]
    questions = write_jsonl(tmp_path / "q.jsonl", rows)
    frame_scores = write_jsonl(
        tmp_path / "d.jsonl",
        [{"frame_id": f, "score": s} for f, s in [("f1", 15), ("f2", 28), ("f3", 40), ("f4", 60)]],
    )
    out = tmp_path / "splits"
    argv = [
        "build-dataset", "--questions", str(questions), "--frame-scores", str(frame_scores), "--out", str(out),
        "--train-range", "25", "45", "--hard-range", "10", "31",
    ]
    assert run(argv) == EXIT_OK

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["train_spec"]["range"] == [25, 45]
    assert manifest["hard_spec"]["range"] == [10, 31]
    train_frames = {json.loads(line)["frame_id"] for line in (out / "train.jsonl").read_text().splitlines()}
    hard_frames = {json.loads(line)["frame_id"] for line in (out / "hard.jsonl").read_text().splitlines()}
    assert train_frames == {"f2", "f3"}
    assert hard_frames == {"f1"}


def test_train_is_reproducible(tmp_path, small_config):
    first = _train(tmp_path, small_config, "a")
    second = _train(tmp_path, small_config, "b")
    assert _lines_without_wall_time(first / "metrics.jsonl") == _lines_without_wall_time(second / "metrics.jsonl")
    assert (first / "checkpoint_epoch1.joblib").exists()
    assert json.loads((first / "config.json").read_text())["grpo"]["seed"] == 7


def test_eval_and_report_after_training(tmp_path, small_config, capsys):
    run_dir = _train(tmp_path, small_config, "run")
    split = tmp_path / "split.jsonl"
    data_loader.write_questions(split, group_into_frames(data_loader.synthetic_corpus()))
    capsys.readouterr()

    assert run(["eval", "--checkpoint", str(run_dir / "checkpoint_epoch1.joblib"), "--split", str(split)]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["split"] == "split"
    assert 0.0 <= payload["overall_mean"] <= 100.0
    assert set(payload["per_task_mean"]) == {"perception", "prediction", "planning", "behavior"}

    report_dir = tmp_path / "report"
    assert run(["report", "--metrics", str(run_dir / "metrics.jsonl"), "--out", str(report_dir)]) == EXIT_OK
    for name in ("reward.csv", "task_reward.csv", "response_length.csv", "clip_ratio.csv", "summary.txt"):
        assert (report_dir / name).exists()


def test_judge_check_with_mock(capsys):
    assert run(["judge-check"]) == EXIT_OK
    assert "judge=mock score=50" in capsys.readouterr().out


def test_judge_check_agreement(tmp_path, capsys):
    rows = [{"human": h, "model": m} for h, m in [(1, 2), (2, 4), (3, 5), (4, 9)]]
    path = write_jsonl(tmp_path / "agreement.jsonl", rows)
    assert run(["judge-check", "--agreement", str(path)]) == EXIT_OK
    assert "pearson=0.964764 n=4" in capsys.readouterr().out


def test_http_judge_without_key_is_a_runtime_error(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("JUDGE_API_KEY", raising=False)
    assert run(["judge-check", "--judge", "http", "--judge-url", "http://localhost:9/v1"]) == EXIT_RUNTIME


def test_usage_errors():
    assert run([]) == EXIT_USAGE
    assert run(["train", "--no-such-flag"]) == EXIT_USAGE
    assert run(["build-dataset", "--questions", "q.jsonl"]) == EXIT_USAGE


@pytest.mark.parametrize("command", ["score-data", "build-dataset", "train", "eval", "report", "judge-check"])
def test_help_exits_cleanly(command, capsys):
    assert run([command, "--help"]) == EXIT_OK
    assert "usage:" in capsys.readouterr().out


def test_missing_files_are_runtime_errors(tmp_path):
    assert run(["report", "--metrics", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "out")]) == EXIT_RUNTIME
    assert run(["train", "--out", str(tmp_path / "run")]) == EXIT_RUNTIME


def test_parser_lists_every_command():
    choices = build_parser()._subparsers._group_actions[0].choices
    assert set(choices) == {"score-data", "build-dataset", "train", "eval", "report", "judge-check"}
