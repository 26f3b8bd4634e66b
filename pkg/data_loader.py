"""
Data loading for the driving question corpora.
Handles question, score and frame-score JSONL files, split output, and the
synthetic desk corpus used for offline runs.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import ValidationError

from utils.frame_scoring import DatasetError, SampleScoreTable
from utils.schemas import DrivingTask, Frame, FrameScore, Question, group_into_frames

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ("question_id", "model_id", "sample_index", "score")


# Synthetic desk corpus: every question is "<cue> <modifier>" and the answer
# depends only on the task and the cue.
_SYNTHETIC_ANSWERS = {
    DrivingTask.PERCEPTION: {"ahead": "car", "crosswalk": "pedestrian"},
    DrivingTask.PREDICTION: {"signal": "stop", "merge": "yield"},
    DrivingTask.PLANNING: {"lane": "keep", "exit": "turn"},
    DrivingTask.BEHAVIOR: {"clear": "straight", "blocked": "right"},
}
_SYNTHETIC_MODIFIERS = ("now", "soon", "here", "there")
_SYNTHETIC_ACTIONS = {"straight": "going straight", "right": "steering to the right"}




def read_jsonl_records(path: os.PathLike, encoding: str = "utf-8") -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield (line number, object) pairs; blank lines are skipped"""
    with open(path, "r", encoding=encoding) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}: line {line_no}: malformed JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise DatasetError(f"{path}: line {line_no}: expected a JSON object")
            yield line_no, record


class DataLoader:
    """Reader and writer for question, score, frame-score and split files"""

    def __init__(self, encoding: str = "utf-8"):
        self.encoding = encoding

    def load_questions(self, path: os.PathLike, allow_copies: bool = False) -> List[Question]:
        """
        Load questions in file order.

        With allow_copies, a repeated question_id is accepted when the line carries a
        positive copy_index (oversampled copies written by write_questions).
        """
        questions = []
        seen = set()
        for line_no, record in read_jsonl_records(path, self.encoding):
            try:
                question = Question.model_validate(record)
            except ValidationError as e:
                fields = ", ".join(".".join(str(part) for part in err["loc"]) or "record" for err in e.errors())
                raise DatasetError(f"{path}: line {line_no}: schema error in {fields}: {e.errors()[0]['msg']}") from e
            if question.question_id in seen:
                is_copy = allow_copies and int(record.get("copy_index", 0)) > 0
                if not is_copy:
                    raise DatasetError(f"{path}: duplicate question_id {question.question_id!r}")
            seen.add(question.question_id)
            questions.append(question)
        logger.info(f"Loaded {len(questions)} questions from {path}")
        return questions

    def load_frames(self, path: os.PathLike) -> List[Frame]:
        """Questions grouped by frame_id, frames sorted by id"""
        return group_into_frames(self.load_questions(path))

    def load_scores(self, path: os.PathLike, model_ids: Optional[Sequence[str]] = None) -> SampleScoreTable:
        """Load per-sample scores; model_ids keeps only that subset of scoring models"""
        if os.path.getsize(path) == 0:
            return SampleScoreTable({})
        try:
            df = pd.read_json(path, lines=True, dtype={"question_id": str, "model_id": str}, encoding=self.encoding)
        except ValueError as e:
            raise DatasetError(f"{path}: cannot parse score file: {e}") from e

        missing_cols = [col for col in SCORE_COLUMNS if col not in df.columns]
        if missing_cols:
            raise DatasetError(f"{path}: score file missing columns: {missing_cols}")
        if df[list(SCORE_COLUMNS)].isna().any().any():
            raise DatasetError(f"{path}: score file has empty cells")

        table = SampleScoreTable.from_records(df[list(SCORE_COLUMNS)].to_dict("records"))
        if model_ids:
            table = table.restrict(model_ids)
        logger.info(
            f"Loaded {len(table.entries)} scores for {len(table.question_ids)} questions "
            f"(M={table.model_count}, K={table.samples_per_model})"
        )
        return table

    def write_frame_scores(self, path: os.PathLike, scores: Sequence[FrameScore]) -> None:
        with open(path, "w", encoding=self.encoding) as handle:
            for item in scores:
                handle.write(json.dumps({"frame_id": item.frame_id, "score": item.score}) + "\n")

    def load_frame_scores(self, path: os.PathLike) -> List[FrameScore]:
        scores = []
        for line_no, record in read_jsonl_records(path, self.encoding):
            try:
                scores.append(FrameScore.model_validate(record))
            except ValidationError as e:
                raise DatasetError(f"{path}: line {line_no}: invalid frame score: {e.errors()[0]['msg']}") from e
        return scores

    def load_frame_ids(self, path: os.PathLike) -> List[str]:
        """Exclusion lists: one frame id per line, or JSONL objects with a frame_id key"""
        ids = []
        with open(path, "r", encoding=self.encoding) as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                ids.append(json.loads(line)["frame_id"] if line.startswith("{") else line)
        return ids

    def write_questions(self, path: os.PathLike, frames: Sequence[Frame]) -> int:
        """Write the questions of frames as JSONL; repeated frames are marked with copy_index"""
        copies: Dict[str, int] = {}
        written = 0
        with open(path, "w", encoding=self.encoding) as handle:
            for frame in frames:
                copy_index = copies.get(frame.frame_id, 0)
                copies[frame.frame_id] = copy_index + 1
                for question in frame.questions:
                    record = question.model_dump(mode="json")
                    if copy_index:
                        record["copy_index"] = copy_index
                    handle.write(json.dumps(record) + "\n")
                    written += 1
        return written

    def write_json(self, path: os.PathLike, payload: Any) -> None:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding=self.encoding)

    def synthetic_corpus(self) -> List[Question]:
        """32 questions, 8 per task kind, one frame each, with deterministic reference answers"""
        questions = []
        for task, answers in _SYNTHETIC_ANSWERS.items():
            index = 0
            for cue, answer in answers.items():
                for modifier in _SYNTHETIC_MODIFIERS:
                    frame_id = f"frame-{task.value}-{index}"
                    questions.append(
                        Question(
                            question_id=f"syn-{task.value}-{index}",
                            frame_id=frame_id,
                            task=task.value,
                            prompt_text=f"{cue} {modifier}",
                            image_refs=(f"{frame_id}/CAM_FRONT.jpg",),
                            reference_answer=answer,
                            action_label=_SYNTHETIC_ACTIONS.get(answer),
                        )
                    )
                    index += 1
        return questions


_default_loader = DataLoader()

load_questions = _default_loader.load_questions
load_frames = _default_loader.load_frames
load_scores = _default_loader.load_scores
write_frame_scores = _default_loader.write_frame_scores
load_frame_scores = _default_loader.load_frame_scores
load_frame_ids = _default_loader.load_frame_ids
write_questions = _default_loader.write_questions
write_json = _default_loader.write_json
synthetic_corpus = _default_loader.synthetic_corpus
