"""
GRPO training loop. Every step samples a group per question from the old policy,
scores it, normalizes advantages within the group and takes one Adam step on the
batch-mean objective gradient. Questions of all task kinds are mixed in each epoch.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from services.evaluation_service import EvaluationService
from services.judge_service import Judge
from services.reward_service import RewardService
from utils.config import RunConfig
from utils.grpo_objective import OldPolicyRefresh, objective_and_gradient
from utils.policy_model import (
    AdamState,
    PolicyConfig,
    PolicyParams,
    Rollout,
    Vocab,
    apply_update,
    init_params,
    sample_group,
    save_checkpoint,
    snapshot,
)
from utils.reward_rules import normalize_advantages
from utils.schemas import TASK_ORDER, Question
from utils.telemetry import MetricsSink, StepMetrics, overlength_ratio, record_validation, validation_log_path

logger = logging.getLogger(__name__)

METRICS_LOG_NAME = "metrics.jsonl"


@dataclass
class TrainState:
    params: PolicyParams
    params_ref: PolicyParams
    optimizer: AdamState
    params_old: Optional[PolicyParams] = None
    step: int = 0
    epoch: int = 0

    @classmethod
    def start(cls, params: PolicyParams, config: RunConfig) -> "TrainState":
        grpo = config.grpo
        optimizer = AdamState.for_params(
            params,
            learning_rate=grpo.learning_rate,
            beta1=grpo.adam_beta1,
            beta2=grpo.adam_beta2,
            eps=grpo.adam_eps,
        )
        return cls(params=params, params_ref=snapshot(params), optimizer=optimizer)


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: List[StepMetrics] = field(default_factory=list)
    metrics_path: Optional[Path] = None
    checkpoints: List[Path] = field(default_factory=list)


class TrainerService:
    """GRPO trainer bound to one run config, judge and vocabulary"""

    def __init__(self, config: RunConfig, judge: Judge, vocab: Vocab):
        self.config = config
        self.judge = judge
        self.vocab = vocab
        self.rewards = RewardService(judge, config.reward, vocab)
        self.evaluator = EvaluationService(judge, vocab)

    @property
    def rollout_config(self) -> PolicyConfig:
        """Policy config with the training rollout cap applied"""
        if self.config.grpo.max_rollout_tokens is None:
            return self.config.policy
        return self.config.policy.model_copy(update={"max_len": self.config.grpo.max_rollout_tokens})

    def select_tasks(self, questions: Sequence[Question]) -> List[Question]:
        task_filter = set(self.config.dataset.task_filter)
        if not task_filter:
            return list(questions)
        return [q for q in questions if q.task.kind in task_filter]

    def train_step(self, batch: Sequence[Question], state: TrainState) -> StepMetrics:
        """
        One update on a batch of questions; state.params is replaced on success.
        A judge failure raises before any parameter changes.
        """
        if not batch:
            raise ValueError("training batch is empty")
        started = time.perf_counter()
        grpo = self.config.grpo

        if grpo.old_policy_refresh == OldPolicyRefresh.PER_STEP or state.params_old is None:
            state.params_old = snapshot(state.params)
        sampler_cfg = self.rollout_config

        gradient = np.zeros_like(state.params.theta)
        all_rollouts: List[Rollout] = []
        task_rewards: Dict[str, List[float]] = {}
        objectives, kls = [], []
        degenerate = 0
        for index, question in enumerate(batch):
            prompt_id = f"{state.step}:{index}:{question.question_id}"
            rollouts = sample_group(
                state.params_old, self.vocab.prompt_tokens(question), grpo.group_size, sampler_cfg, grpo.seed, prompt_id
            )
            rewards = self.rewards.score_group(rollouts, question)
            advantages = normalize_advantages(rewards, self.config.reward.sigma_epsilon)
            if not advantages.values.any():
                degenerate += 1

            # Log-probs recorded at sampling time are the old policy's
            terms, group_gradient = objective_and_gradient(
                rollouts, advantages.values, state.params, None, state.params_ref, grpo
            )
            gradient += group_gradient
            objectives.append(terms.objective)
            kls.append(terms.kl)
            all_rollouts.extend(rollouts)
            task_rewards.setdefault(question.task.kind.value, []).extend(rewards.rewards)

        if degenerate == len(batch):
            logger.warning(f"Step {state.step}: every group had zero reward variance")

        state.params = apply_update(state.params, -gradient / len(batch), state.optimizer)

        rewards_flat = [r for values in task_rewards.values() for r in values]
        metrics = StepMetrics(
            step=state.step,
            mean_reward=float(np.mean(rewards_flat)),
            per_task_reward={
                task.value: float(np.mean(task_rewards[task.value])) for task in TASK_ORDER if task.value in task_rewards
            },
            mean_response_length=float(np.mean([len(r.response_tokens) for r in all_rollouts])),
            overlength_clip_ratio=overlength_ratio(all_rollouts),
            mean_kl=float(np.mean(kls)),
            objective=float(np.mean(objectives)),
            wall_ms=int((time.perf_counter() - started) * 1000),
        )
        logger.debug(
            f"step {metrics.step}: reward={metrics.mean_reward:.2f} length={metrics.mean_response_length:.2f} "
            f"clip={metrics.overlength_clip_ratio:.3f} kl={metrics.mean_kl:.5f}"
        )
        state.step += 1
        return metrics

    def train(
        self,
        questions: Sequence[Question],
        out_dir: Path,
        params: Optional[PolicyParams] = None,
        validation: Optional[Sequence[Question]] = None,
        show_progress: bool = True,
    ) -> TrainResult:
        """
        epochs x ceil(N / batch) steps. The reference policy stays at the initial
        parameters; a checkpoint is written at the end of every epoch and each step's
        metrics line is on disk before the next step starts.
        """
        questions = self.select_tasks(questions)
        if not questions:
            raise ValueError("no training questions left after the task filter")
        grpo = self.config.grpo
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        if params is None:
            params = init_params(self.config.policy)
        state = TrainState.start(params, self.config)
        metrics_path = out_dir / METRICS_LOG_NAME
        sink = MetricsSink(metrics_path, truncate=True)
        result = TrainResult(params=params, metrics_path=metrics_path)

        validate = bool(grpo.eval_every and validation)
        if validate:
            validation_log_path(metrics_path).write_text("", encoding="utf-8")

        batch_size = grpo.prompt_batch_size
        steps_per_epoch = math.ceil(len(questions) / batch_size)
        rng = np.random.default_rng(grpo.seed)
        logger.info(
            f"Training on {len(questions)} questions: {grpo.epochs} epochs x {steps_per_epoch} steps, "
            f"G={grpo.group_size}, batch={batch_size}"
        )

        with tqdm(total=grpo.epochs * steps_per_epoch, desc="train", disable=not show_progress or None) as progress:
            for epoch in range(grpo.epochs):
                state.epoch = epoch
                if grpo.old_policy_refresh == OldPolicyRefresh.PER_EPOCH:
                    state.params_old = snapshot(state.params)
                order = rng.permutation(len(questions))
                for start in range(0, len(questions), batch_size):
                    batch = [questions[i] for i in order[start:start + batch_size]]
                    metrics = self.train_step(batch, state)
                    sink.record(metrics)
                    result.metrics.append(metrics)
                    progress.update(1)
                    progress.set_postfix(reward=f"{metrics.mean_reward:.1f}")

                    if validate and state.step % grpo.eval_every == 0:
                        evaluation = self.evaluator.evaluate(
                            validation,
                            state.params,
                            split_name="validation",
                            temperature=grpo.eval_temperature,
                            repeats=grpo.eval_repeats,
                            seed=grpo.seed,
                        )
                        record_validation(validation_log_path(metrics_path), metrics.step, evaluation)

                checkpoint_path = out_dir / f"checkpoint_epoch{epoch + 1}.joblib"
                save_checkpoint(checkpoint_path, state.params, self.vocab, state.optimizer, state.step, epoch + 1)
                result.checkpoints.append(checkpoint_path)
                epoch_metrics = result.metrics[-steps_per_epoch:]
                logger.info(
                    f"Epoch {epoch + 1}/{grpo.epochs}: mean reward "
                    f"{np.mean([m.mean_reward for m in epoch_metrics]):.2f}"
                )

        result.params = state.params
        return result


def train_step(
    batch: Sequence[Question],
    state: TrainState,
    judge: Judge,
    config: RunConfig,
    vocab: Vocab,
) -> StepMetrics:
    return TrainerService(config, judge, vocab).train_step(batch, state)


def train(
    questions: Sequence[Question],
    config: RunConfig,
    judge: Judge,
    vocab: Vocab,
    out_dir: Path,
    params: Optional[PolicyParams] = None,
    validation: Optional[Sequence[Question]] = None,
    show_progress: bool = True,
) -> TrainResult:
    return TrainerService(config, judge, vocab).train(questions, out_dir, params, validation, show_progress)
