"""
Two-stage reward for a rollout group: the rule gate first, then the judge for
whatever passes. Gated rollouts get zero reward and never reach the judge.
"""

import logging
from typing import List, Sequence

from services.judge_service import Judge, JudgeError, JudgeRequest
from utils.policy_model import Rollout, Vocab
from utils.reward_rules import GroupRewards, RewardConfig, rule_gate
from utils.schemas import Question

logger = logging.getLogger(__name__)


class RewardService:
    """Rewards rollout groups with the rule gate and a judge"""

    def __init__(self, judge: Judge, cfg: RewardConfig, vocab: Vocab):
        self.judge = judge
        self.cfg = cfg
        self.vocab = vocab

    def judge_requests(self, rollouts: Sequence[Rollout], question: Question) -> List[JudgeRequest]:
        return [
            JudgeRequest(
                task=question.task,
                question=question.prompt_text,
                reference_answer=question.reference_answer,
                response=self.vocab.decode(rollout.response_tokens),
            )
            for rollout in rollouts
        ]

    def score_group(self, rollouts: Sequence[Rollout], question: Question) -> GroupRewards:
        """
        Rewards in rollout order.
        A judge failure on any ungated rollout fails the whole group.
        """
        if not rollouts:
            raise ValueError("cannot score an empty rollout group")

        gates = [rule_gate(r.response_tokens, self.cfg, truncated=r.truncated) for r in rollouts]
        passing = [i for i, gate in enumerate(gates) if gate.passed]
        requests = self.judge_requests([rollouts[i] for i in passing], question)

        scores = self.judge.score_many(requests) if requests else []
        for score in scores:
            if not 0.0 <= score <= 100.0:
                raise JudgeError(f"{self.judge.judge_id} returned out-of-range score {score}")

        rewards = [0.0] * len(rollouts)
        for index, score in zip(passing, scores):
            rewards[index] = float(score)
        gated = [not gate.passed for gate in gates]
        if any(gated):
            reasons = [gate.reason.value for gate in gates if not gate.passed]
            logger.debug(
                f"{question.question_id}: {len(reasons)} of {len(rollouts)} rollouts gated ({', '.join(reasons)})"
            )
        return GroupRewards(rewards=rewards, gated=gated)


def score_group(
    rollouts: Sequence[Rollout],
    question: Question,
    judge: Judge,
    cfg: RewardConfig,
    vocab: Vocab,
) -> GroupRewards:
    return RewardService(judge, cfg, vocab).score_group(rollouts, question)
