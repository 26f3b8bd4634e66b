"""
Held-out evaluation: decode one response per question, judge it, and report
per-task mean scores.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from services.judge_service import Judge, JudgeError, JudgeRequest, judge_score
from utils.policy_model import PolicyParams, Vocab, greedy_decode, rollout_seed, sample_sequence
from utils.schemas import TASK_ORDER, Question
from utils.telemetry import EvalReport

logger = logging.getLogger(__name__)

ResponseFn = Callable[[Question], str]


def policy_responder(
    params: PolicyParams,
    vocab: Vocab,
    max_len: Optional[int] = None,
    temperature: float = 0.0,
    seed: int = 0,
    repeat: int = 0,
) -> ResponseFn:
    """Greedy decoding at temperature 0, seeded sampling otherwise"""
    max_len = max_len or params.config.max_len

    def respond(question: Question) -> str:
        prompt = vocab.prompt_tokens(question)
        if temperature == 0.0:
            tokens = greedy_decode(params, prompt, max_len)
        else:
            rng = np.random.default_rng(rollout_seed(seed, f"eval:{question.question_id}", repeat))
            tokens, _, _ = sample_sequence(params, prompt, rng, max_len, temperature)
        return vocab.decode(tokens)

    return respond


class EvaluationService:
    """Scores a policy on a question split with one judge"""

    def __init__(self, judge: Judge, vocab: Vocab):
        self.judge = judge
        self.vocab = vocab

    def judge_all(self, questions: Sequence[Question], responses: Sequence[str]) -> List[float]:
        scores = []
        for question, response in zip(questions, responses):
            request = JudgeRequest(
                task=question.task,
                question=question.prompt_text,
                reference_answer=question.reference_answer,
                response=response,
            )
            try:
                scores.append(judge_score(request, self.judge))
            except JudgeError as e:
                raise JudgeError(f"judging {question.question_id} failed: {e}", raw_reply=e.raw_reply) from e
        return scores

    def evaluate(
        self,
        questions: Sequence[Question],
        params: PolicyParams,
        split_name: str = "eval",
        max_len: Optional[int] = None,
        temperature: float = 0.0,
        repeats: int = 1,
        seed: int = 0,
        respond: Optional[ResponseFn] = None,
    ) -> EvalReport:
        """
        Per-task mean judge score over the split.

        With repeats > 1 each pass decodes again (fresh seeds when sampling) and the
        per-task means are averaged over passes. respond replaces policy decoding.
        """
        if not questions:
            raise ValueError(f"split {split_name} is empty")
        if repeats < 1:
            raise ValueError(f"repeats must be at least 1, got {repeats}")

        by_task: Dict[str, List[int]] = {}
        for index, question in enumerate(questions):
            by_task.setdefault(question.task.kind.value, []).append(index)

        pass_means: Dict[str, List[float]] = {task: [] for task in by_task}
        for repeat in range(repeats):
            responder = respond or policy_responder(params, self.vocab, max_len, temperature, seed, repeat)
            scores = self.judge_all(questions, [responder(q) for q in questions])
            for task, indices in by_task.items():
                pass_means[task].append(sum(scores[i] for i in indices) / len(indices))

        order = [task.value for task in TASK_ORDER if task.value in by_task]
        report = EvalReport(
            split=split_name,
            per_task_mean={task: sum(pass_means[task]) / repeats for task in order},
            counts={task: len(by_task[task]) for task in order},
            judge_id=self.judge.judge_id,
            seed=seed,
        )
        summary = ", ".join(f"{task}={report.per_task_mean[task]:.2f}" for task in order)
        logger.info(
            f"Evaluated {len(questions)} questions on {split_name}: {summary} (overall {report.overall_mean:.2f})"
        )
        return report


def evaluate_split(
    questions: Sequence[Question],
    params: PolicyParams,
    vocab: Vocab,
    judge: Judge,
    split_name: str = "eval",
    max_len: Optional[int] = None,
    temperature: float = 0.0,
    repeats: int = 1,
    seed: int = 0,
    respond: Optional[ResponseFn] = None,
) -> EvalReport:
    return EvaluationService(judge, vocab).evaluate(
        questions, params, split_name, max_len, temperature, repeats, seed, respond
    )
