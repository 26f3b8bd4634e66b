import json

from utils.schemas import Question


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    return path


def make_question(question_id, frame_id, task="perception", prompt="what is ahead", reference="car", action=None):
    return Question(
        question_id=question_id,
        frame_id=frame_id,
        task=task,
        prompt_text=prompt,
        reference_answer=reference,
        action_label=action,
    )


def question_row(question_id, frame_id, task="perception", prompt="what is ahead", reference="car", **extra):
    row = {
        "question_id": question_id,
        "frame_id": frame_id,
        "task": task,
        "prompt_text": prompt,
        "reference_answer": reference,
    }
    row.update(extra)
    return row
