"""
Training telemetry: per-step metrics records, the append-only metrics log,
evaluation reports, agreement statistics and CSV report generation.
"""

import json
import logging
import math
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.policy_model import Rollout
from utils.schemas import TASK_ORDER

logger = logging.getLogger(__name__)

TASK_NAMES = tuple(task.value for task in TASK_ORDER)
VALIDATION_LOG_NAME = "validation.jsonl"


class MetricsLogError(RuntimeError):
    """Raised for unwritable, out-of-order or corrupt metrics logs"""


def _check_task_keys(values: Dict[str, float]) -> Dict[str, float]:
    unknown = [key for key in values if key not in TASK_NAMES]
    if unknown:
        raise ValueError(f"unknown task kinds: {unknown}")
    return values


class StepMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int = Field(ge=0)
    mean_reward: float
    per_task_reward: Dict[str, float] = Field(default_factory=dict)
    mean_response_length: float = Field(ge=0.0)
    overlength_clip_ratio: float = Field(ge=0.0, le=1.0)
    mean_kl: float
    objective: float
    wall_ms: int = Field(default=0, ge=0)

    @field_validator("per_task_reward")
    @classmethod
    def _known_tasks(cls, value):
        return _check_task_keys(value)


class EvalReport(BaseModel):
    """Per-task mean judge scores over one split"""

    model_config = ConfigDict(extra="forbid")

    split: str
    per_task_mean: Dict[str, float]
    counts: Dict[str, int]
    judge_id: str
    seed: int = 0

    @field_validator("per_task_mean", "counts")
    @classmethod
    def _known_tasks(cls, value):
        return _check_task_keys(value)

    @model_validator(mode="after")
    def _check(self):
        if set(self.per_task_mean) != set(self.counts):
            raise ValueError("per_task_mean and counts must cover the same tasks")
        for task, count in self.counts.items():
            if count < 1:
                raise ValueError(f"task {task} reported with count {count}")
            if not 0.0 <= self.per_task_mean[task] <= 100.0:
                raise ValueError(f"task {task} mean {self.per_task_mean[task]} outside [0, 100]")
        return self

    @property
    def overall_mean(self) -> float:
        total = sum(self.counts.values())
        return sum(self.per_task_mean[t] * n for t, n in self.counts.items()) / total


def overlength_ratio(rollouts: Sequence[Rollout]) -> float:
    """Fraction of rollouts cut off at the length cap"""
    if not rollouts:
        raise ValueError("overlength ratio of an empty rollout list")
    untruncated = sum(1 for rollout in rollouts if not rollout.truncated)
    return 1.0 - untruncated / len(rollouts)


def _append_line(path: Path, record: dict) -> None:
    line = json.dumps(record, sort_keys=True) + "\n"
    try:
        with open(path, "a", encoding="utf-8") as handle:
            handle.write(line)
            handle.flush()
            os.fsync(handle.fileno())
    except OSError as e:
        raise MetricsLogError(f"cannot append to {path}: {e}") from e


class MetricsSink:
    """Single-writer JSONL metrics log enforcing strictly increasing steps"""

    def __init__(self, path: os.PathLike, truncate: bool = False):
        self.path = Path(path)
        self.last_step: Optional[int] = None
        if truncate:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.path.write_text("", encoding="utf-8")
            except OSError as e:
                raise MetricsLogError(f"cannot create metrics log {self.path}: {e}") from e
        elif self.path.exists() and self.path.stat().st_size:
            existing = read_metrics_log(self.path)
            self.last_step = existing[-1].step

    def record(self, metrics: StepMetrics) -> None:
        if self.last_step is not None and metrics.step <= self.last_step:
            raise MetricsLogError(f"step {metrics.step} does not follow step {self.last_step} in {self.path}")
        _append_line(self.path, metrics.model_dump(mode="json"))
        self.last_step = metrics.step


def record_step(metrics: StepMetrics, sink: Union[MetricsSink, os.PathLike]) -> MetricsSink:
    """Append one metrics line; a path sink resumes after the last step already in the file"""
    if not isinstance(sink, MetricsSink):
        sink = MetricsSink(sink)
    sink.record(metrics)
    return sink


def read_metrics_log(path: os.PathLike) -> List[StepMetrics]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(StepMetrics.model_validate_json(line))
            except ValidationError as e:
                raise MetricsLogError(f"{path}: line {line_no}: corrupt metrics record ({e.errors()[0]['msg']})") from e
    if not records:
        raise MetricsLogError(f"{path}: metrics log is empty")
    return records


def validation_log_path(metrics_path: os.PathLike) -> Path:
    return Path(metrics_path).with_name(VALIDATION_LOG_NAME)


def record_validation(path: os.PathLike, step: int, report: EvalReport) -> None:
    _append_line(Path(path), {"step": step, "report": report.model_dump(mode="json")})


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation coefficient of two equal-length samples"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("undefined correlation: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _summary_lines(series: Dict[str, pd.Series]) -> List[str]:
    lines = []
    for name, values in series.items():
        values = values.dropna()
        if values.empty:
            lines.append(f"{name}: no data")
            continue
        lines.append(
            f"{name}: first={float(values.iloc[0])!r} last={float(values.iloc[-1])!r} "
            f"min={float(values.min())!r} max={float(values.max())!r}"
        )
    return lines


def report(metrics_path: os.PathLike, out_dir: os.PathLike) -> Dict[str, Path]:
    """
    Write per-series CSV files and a plain-text summary for a metrics log.

    Files: reward.csv, task_reward.csv, response_length.csv, clip_ratio.csv,
    summary.txt, plus validation_task_reward.csv when a validation log sits
    next to the metrics log.
    """
    records = read_metrics_log(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    df = pd.DataFrame([r.model_dump() for r in records])
    tasks = pd.DataFrame([r.per_task_reward for r in records], columns=list(TASK_NAMES))
    tasks.insert(0, "step", df["step"])

    outputs = {
        "reward": out_dir / "reward.csv",
        "task_reward": out_dir / "task_reward.csv",
        "response_length": out_dir / "response_length.csv",
        "clip_ratio": out_dir / "clip_ratio.csv",
    }
    df[["step", "mean_reward"]].to_csv(outputs["reward"], index=False)
    tasks.to_csv(outputs["task_reward"], index=False)
    df[["step", "mean_response_length"]].to_csv(outputs["response_length"], index=False)
    df[["step", "overlength_clip_ratio"]].to_csv(outputs["clip_ratio"], index=False)

    series = {
        "mean_reward": df["mean_reward"],
        "mean_response_length": df["mean_response_length"],
        "overlength_clip_ratio": df["overlength_clip_ratio"],
        "mean_kl": df["mean_kl"],
        "objective": df["objective"],
    }
    series.update({f"reward_{task}": tasks[task] for task in TASK_NAMES})
    lines = [f"steps: {len(records)} (first={records[0].step}, last={records[-1].step})"]
    lines += _summary_lines(series)

    validation_path = validation_log_path(metrics_path)
    if validation_path.exists():
        rows = []
        with open(validation_path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    evaluation = EvalReport.model_validate(entry["report"])
                except (json.JSONDecodeError, KeyError, ValidationError) as e:
                    raise MetricsLogError(f"{validation_path}: line {line_no}: corrupt validation record") from e
                rows.append({"step": entry["step"], **evaluation.per_task_mean})
        if rows:
            outputs["validation_task_reward"] = out_dir / "validation_task_reward.csv"
            pd.DataFrame(rows, columns=["step", *TASK_NAMES]).to_csv(outputs["validation_task_reward"], index=False)
            lines.append(f"validation evaluations: {len(rows)}")

    outputs["summary"] = out_dir / "summary.txt"
    outputs["summary"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Report for {len(records)} steps written to {out_dir}")
    return outputs
