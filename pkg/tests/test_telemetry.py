import json
import math

import pandas as pd
import pytest

from utils.policy_model import Rollout
from utils.telemetry import (
    EvalReport,
    MetricsLogError,
    MetricsSink,
    StepMetrics,
    overlength_ratio,
    pearson,
    read_metrics_log,
    record_step,
    record_validation,
    report,
    validation_log_path,
)


def _metrics(step, reward=10.0, **tasks):
    return StepMetrics(
        step=step,
        mean_reward=reward,
        per_task_reward=tasks or {"perception": reward},
        mean_response_length=4.0 + step,
        overlength_clip_ratio=0.25,
        mean_kl=0.01,
        objective=0.1,
        wall_ms=12,
    )


def _rollouts(truncated_flags):
    return [Rollout("p", (0,), (5,), (-1.0,), flag) for flag in truncated_flags]


def test_overlength_ratio():
    assert overlength_ratio(_rollouts([True, True] + [False] * 6)) == 0.25
    assert overlength_ratio(_rollouts([False] * 3)) == 0.0
    assert overlength_ratio(_rollouts([True] * 3)) == 1.0
    with pytest.raises(ValueError):
        overlength_ratio([])


def test_record_steps_in_order(tmp_path):
    path = tmp_path / "metrics.jsonl"
    sink = MetricsSink(path, truncate=True)
    for step in (1, 2, 3):
        record_step(_metrics(step), sink)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert StepMetrics.model_validate_json(lines[1]) == _metrics(2)


def test_repeated_step_is_rejected(tmp_path):
    path = tmp_path / "metrics.jsonl"
    record_step(_metrics(2), path)
    with pytest.raises(MetricsLogError):
        record_step(_metrics(2), path)


def test_unknown_task_key_rejected():
    with pytest.raises(ValueError):
        _metrics(0, driving=3.0)


def test_corrupt_line_reports_line_number(tmp_path):
    path = tmp_path / "metrics.jsonl"
    path.write_text(_metrics(0).model_dump_json() + "\n{broken\n")
    with pytest.raises(MetricsLogError, match="line 2"):
        read_metrics_log(path)


def test_pearson_fixtures():
    assert pearson([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0, abs=1e-12)
    assert pearson([1, 2, 3], [6, 4, 2]) == pytest.approx(-1.0, abs=1e-12)
    assert pearson([1, 2, 3, 4], [2, 4, 5, 9]) == pytest.approx(11 / math.sqrt(130), abs=1e-12)


def test_pearson_properties():
    x, y = [3.0, 1.0, 4.0, 1.5, 9.0], [2.0, 7.0, 1.0, 8.0, 2.5]
    r = pearson(x, y)
    assert r == pytest.approx(pearson(y, x), abs=1e-12)
    assert r == pytest.approx(pearson([2 * v + 7 for v in x], [0.5 * v - 1 for v in y]), abs=1e-12)
    assert -1.0 <= r <= 1.0


def test_pearson_undefined():
    with pytest.raises(ValueError, match="undefined correlation"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [2])


def test_eval_report_validation():
    with pytest.raises(ValueError):
        EvalReport(split="s", per_task_mean={"planning": 50.0}, counts={"planning": 0}, judge_id="mock")
    with pytest.raises(ValueError):
        EvalReport(split="s", per_task_mean={"planning": 50.0}, counts={}, judge_id="mock")


def test_report_writes_series_and_summary(tmp_path):
    path = tmp_path / "metrics.jsonl"
    sink = MetricsSink(path, truncate=True)
    for step in range(10):
        sink.record(_metrics(step, reward=5.0 * step + 0.1, perception=1.0, behavior=2.0 * step))
    outputs = report(path, tmp_path / "report")

    for name in ("reward", "task_reward", "response_length", "clip_ratio"):
        assert len(pd.read_csv(outputs[name])) == 10
    assert "validation_task_reward" not in outputs
    last_reward = json.loads(path.read_text().splitlines()[-1])["mean_reward"]
    summary = outputs["summary"].read_text()
    assert f"mean_reward: first=0.1 last={last_reward!r}" in summary


def test_report_includes_validation_series(tmp_path):
    path = tmp_path / "metrics.jsonl"
    record_step(_metrics(0), path)
    evaluation = EvalReport(split="val", per_task_mean={"planning": 40.0}, counts={"planning": 3}, judge_id="mock")
    record_validation(validation_log_path(path), 0, evaluation)
    outputs = report(path, tmp_path / "out")
    frame = pd.read_csv(outputs["validation_task_reward"])
    assert frame["planning"].tolist() == [40.0]


def test_report_on_empty_log(tmp_path):
    path = tmp_path / "metrics.jsonl"
    path.write_text("")
    with pytest.raises(MetricsLogError):
        report(path, tmp_path / "out")


def test_overall_mean_weights_tasks_by_count():
    evaluation = EvalReport(
        split="s",
        per_task_mean={"perception": 80.0, "behavior": 20.0},
        counts={"perception": 3, "behavior": 1},
        judge_id="mock",
    )
    assert evaluation.overall_mean == pytest.approx(65.0, abs=1e-12)
