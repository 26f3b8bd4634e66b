"""
Record types shared across the curation, reward and training code.
A question carries its driving task and answer style; questions sharing an image frame form a Frame.
"""

import re
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class DrivingTask(str, Enum):
    PERCEPTION = "perception"
    PREDICTION = "prediction"
    PLANNING = "planning"
    BEHAVIOR = "behavior"


TASK_ORDER: Tuple[DrivingTask, ...] = (
    DrivingTask.PERCEPTION,
    DrivingTask.PREDICTION,
    DrivingTask.PLANNING,
    DrivingTask.BEHAVIOR,
)


class AnswerStyle(str, Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    OPEN_ENDED = "open_ended"
    YES_NO = "yes_no"


# Style assumed when a record gives only the task name
DEFAULT_STYLES = {
    DrivingTask.PERCEPTION: AnswerStyle.OPEN_ENDED,
    DrivingTask.PREDICTION: AnswerStyle.OPEN_ENDED,
    DrivingTask.PLANNING: AnswerStyle.OPEN_ENDED,
    DrivingTask.BEHAVIOR: AnswerStyle.MULTIPLE_CHOICE,
}


class TaskKind(BaseModel):
    """One of the four driving tasks plus the answer style of the question"""

    model_config = ConfigDict(frozen=True)

    kind: DrivingTask
    style: AnswerStyle

    @model_validator(mode="before")
    @classmethod
    def _expand_shorthand(cls, value):
        if isinstance(value, str):
            kind = DrivingTask(value.strip().lower())
            return {"kind": kind, "style": DEFAULT_STYLES[kind]}
        return value


class Question(BaseModel):
    """A single visual question; images are opaque references"""

    model_config = ConfigDict(extra="ignore", frozen=True)

    question_id: str = Field(min_length=1)
    frame_id: str
    task: TaskKind
    prompt_text: str
    image_refs: Tuple[str, ...] = ()
    reference_answer: str = ""
    action_label: Optional[str] = None

    @field_validator("frame_id", "prompt_text")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("must be non-empty")
        return value


class Frame(BaseModel):
    """Questions asked about the same image frame"""

    model_config = ConfigDict(frozen=True)

    frame_id: str
    questions: Tuple[Question, ...]

    @model_validator(mode="after")
    def _check_members(self):
        if not self.questions:
            raise ValueError(f"frame {self.frame_id} has no questions")
        for question in self.questions:
            if question.frame_id != self.frame_id:
                raise ValueError(
                    f"question {question.question_id} belongs to frame {question.frame_id}, not {self.frame_id}"
                )
        return self

    @property
    def action_class(self) -> Optional[str]:
        """Behavior question's action label if present, else the first labeled question's"""
        for question in self.questions:
            if question.task.kind == DrivingTask.BEHAVIOR and question.action_label:
                return question.action_label
        for question in self.questions:
            if question.action_label:
                return question.action_label
        return None


class FrameScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: str
    score: float = Field(ge=0.0, le=100.0)


def group_into_frames(questions: List[Question]) -> List[Frame]:
    """Group questions by frame_id keeping input order within a frame; frames sorted by id"""
    grouped = {}
    for question in questions:
        grouped.setdefault(question.frame_id, []).append(question)
    return [Frame(frame_id=frame_id, questions=tuple(grouped[frame_id])) for frame_id in sorted(grouped)]


_WORD_PATTERN = re.compile(r"[\w']+")


def word_tokens(text: str) -> List[str]:
    """Lowercased word tokens, punctuation dropped"""
    return _WORD_PATTERN.findall(text.lower())
