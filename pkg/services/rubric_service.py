"""
Rubric routing for the judge.
Each (task kind, answer style) pair maps to a plain-text template under
templates/rubrics; the template id is the file stem.
"""

import logging
import re
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Union

from utils.schemas import AnswerStyle, DrivingTask, TaskKind

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates" / "rubrics"
GENERIC_TEMPLATE = "generic"
PLACEHOLDERS = ("question", "reference", "response")
_PLACEHOLDER_PATTERN = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")

_STYLE_SUFFIX = {
    AnswerStyle.MULTIPLE_CHOICE: "mcq",
    AnswerStyle.OPEN_ENDED: "vqa",
    AnswerStyle.YES_NO: "yesno",
}

SUPPORTED_PAIRS = frozenset(
    {
        (DrivingTask.PERCEPTION, AnswerStyle.MULTIPLE_CHOICE),
        (DrivingTask.PERCEPTION, AnswerStyle.OPEN_ENDED),
        (DrivingTask.PREDICTION, AnswerStyle.OPEN_ENDED),
        (DrivingTask.PREDICTION, AnswerStyle.YES_NO),
        (DrivingTask.PLANNING, AnswerStyle.OPEN_ENDED),
        (DrivingTask.BEHAVIOR, AnswerStyle.MULTIPLE_CHOICE),
    }
)


class RenderedRubric(NamedTuple):
    template_id: str
    text: str
    fallback: bool


class RubricService:
    """Loads rubric templates once and renders them for judge requests"""

    def __init__(self, template_dir: Optional[Path] = None):
        self.template_dir = Path(template_dir) if template_dir else DEFAULT_TEMPLATE_DIR
        self._templates: Dict[str, str] = {}

    def template_id(self, kind: DrivingTask, style: AnswerStyle) -> str:
        if (kind, style) not in SUPPORTED_PAIRS:
            return GENERIC_TEMPLATE
        return f"{kind.value}_{_STYLE_SUFFIX[style]}"

    def template(self, template_id: str) -> str:
        if template_id not in self._templates:
            path = self.template_dir / f"{template_id}.txt"
            self._templates[template_id] = path.read_text(encoding="utf-8")
        return self._templates[template_id]

    def route(
        self,
        task: Union[TaskKind, DrivingTask],
        style: Optional[AnswerStyle] = None,
        question: str = "",
        reference: str = "",
        response: str = "",
    ) -> RenderedRubric:
        if isinstance(task, TaskKind):
            kind, style = task.kind, style or task.style
        else:
            kind = DrivingTask(task)
        if style is None:
            raise ValueError("answer style is required when routing by task kind alone")
        style = AnswerStyle(style)

        template_id = self.template_id(kind, style)
        fallback = template_id == GENERIC_TEMPLATE
        if fallback:
            logger.warning(f"No rubric for ({kind.value}, {style.value}); using the generic rubric")

        # Single pass so braces inside the substituted text are left alone
        values = {"question": question, "reference": reference, "response": response}
        text = _PLACEHOLDER_PATTERN.sub(lambda m: values[m.group(1)], self.template(template_id))
        return RenderedRubric(template_id, text, fallback)


_default_service: Optional[RubricService] = None


def route_rubric(
    task: Union[TaskKind, DrivingTask],
    style: Optional[AnswerStyle] = None,
    question: str = "",
    reference: str = "",
    response: str = "",
) -> RenderedRubric:
    global _default_service
    if _default_service is None:
        _default_service = RubricService()
    return _default_service.route(task, style, question, reference, response)
