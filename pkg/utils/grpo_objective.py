"""
Clipped group-relative surrogate with a KL penalty toward the reference policy, and its exact gradient.

J = 1/G sum_i 1/|o_i| sum_t min(r_it A_i, clip(r_it, 1-eps, 1+eps) A_i) - beta * KL
with r_it = pi_theta / pi_old per token, A_i shared by every token of rollout i and
KL the token mean of rho - log rho - 1, rho = pi_ref / pi_theta.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from utils.policy_model import PolicyParams, Rollout, sequence_logprob_grad, sequence_logprobs


class ObjectiveError(ValueError):
    """Raised when rollouts and advantages do not line up"""


class OldPolicyRefresh(str, Enum):
    PER_STEP = "per_step"
    PER_EPOCH = "per_epoch"


class GrpoConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    group_size: int = Field(default=8, ge=1)
    clip_epsilon: float = Field(default=0.2, gt=0.0, lt=1.0)
    kl_beta: float = Field(default=1e-2, ge=0.0)
    prompt_batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=5, ge=0)
    old_policy_refresh: OldPolicyRefresh = OldPolicyRefresh.PER_STEP
    # Overrides [policy] max_len for training rollouts when set
    max_rollout_tokens: Optional[int] = Field(default=None, ge=1)
    seed: int = 0
    learning_rate: float = Field(default=1e-2, ge=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    eval_every: int = Field(default=0, ge=0)
    eval_repeats: int = Field(default=1, ge=1)
    eval_temperature: float = Field(default=0.0, ge=0.0)


def token_ratio(logp_new: float, logp_old: float) -> float:
    return math.exp(logp_new - logp_old)


def clipped_term(ratio: float, advantage: float, epsilon: float) -> Tuple[float, bool]:
    """min(r*A, clip(r, 1-eps, 1+eps)*A) and whether the clipped branch was strictly smaller"""
    if ratio <= 0.0:
        raise ValueError(f"policy ratio must be positive, got {ratio}")
    unclipped = ratio * advantage
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon) * advantage
    if clipped < unclipped:
        return clipped, True
    return unclipped, False


def kl_token(logp_new: float, logp_ref: float) -> float:
    """rho - log rho - 1 with rho = pi_ref / pi_theta; nonnegative, zero iff the policies agree"""
    log_rho = logp_ref - logp_new
    return math.exp(log_rho) - log_rho - 1.0


@dataclass
class SurrogateTerms:
    """Per-token ratios, clip flags and contributions, plus group KL and objective"""

    ratios: List[np.ndarray]
    clipped: List[np.ndarray]
    contributions: List[np.ndarray]
    surrogate: float
    kl: float
    objective: float


def _check_inputs(rollouts: Sequence[Rollout], advantages: Sequence[float]) -> None:
    if len(rollouts) != len(advantages):
        raise ObjectiveError(f"{len(rollouts)} rollouts but {len(advantages)} advantages")
    if not rollouts:
        raise ObjectiveError("empty group")


def _old_logprobs(rollout: Rollout, params_old: Optional[PolicyParams]) -> np.ndarray:
    if params_old is None:
        return np.asarray(rollout.sample_logprobs, dtype=np.float64)
    return sequence_logprobs(params_old, rollout.prompt_tokens, rollout.output_tokens)


def objective_and_gradient(
    rollouts: Sequence[Rollout],
    advantages: Sequence[float],
    params: PolicyParams,
    params_old: Optional[PolicyParams],
    params_ref: PolicyParams,
    cfg: GrpoConfig,
    with_gradient: bool = True,
) -> Tuple[SurrogateTerms, Optional[np.ndarray]]:
    """
    Evaluate J and, optionally, dJ/dtheta.

    params_old=None uses the log-probs recorded at sampling time. Clipped tokens
    contribute no surrogate gradient; every token contributes -beta (1 - rho) / N
    times its score function through the KL term.
    """
    _check_inputs(rollouts, advantages)
    group = len(rollouts)
    eps = cfg.clip_epsilon

    per_rollout = []
    for rollout, advantage in zip(rollouts, advantages):
        if not rollout.output_tokens:
            per_rollout.append(None)
            continue
        logp_new = sequence_logprobs(params, rollout.prompt_tokens, rollout.output_tokens)
        logp_old = _old_logprobs(rollout, params_old)
        logp_ref = sequence_logprobs(params_ref, rollout.prompt_tokens, rollout.output_tokens)
        ratio = np.exp(logp_new - logp_old)
        unclipped = ratio * advantage
        clipped_values = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage
        is_clipped = clipped_values < unclipped
        contribution = np.where(is_clipped, clipped_values, unclipped)
        log_rho = logp_ref - logp_new
        kl_terms = np.exp(log_rho) - log_rho - 1.0
        per_rollout.append((ratio, is_clipped, contribution, log_rho, kl_terms))

    token_total = sum(len(item[0]) for item in per_rollout if item is not None)
    surrogate = sum(item[2].mean() for item in per_rollout if item is not None) / group
    kl = float(np.concatenate([item[4] for item in per_rollout if item is not None]).mean()) if token_total else 0.0
    terms = SurrogateTerms(
        ratios=[item[0] if item else np.zeros(0) for item in per_rollout],
        clipped=[item[1] if item else np.zeros(0, dtype=bool) for item in per_rollout],
        contributions=[item[2] if item else np.zeros(0) for item in per_rollout],
        surrogate=float(surrogate),
        kl=kl,
        objective=float(surrogate - cfg.kl_beta * kl),
    )
    if not with_gradient:
        return terms, None

    gradient = np.zeros_like(params.theta)
    for rollout, advantage, item in zip(rollouts, advantages, per_rollout):
        if item is None:
            continue
        ratio, is_clipped, _, log_rho, _ = item
        length = len(ratio)
        coeffs = np.where(is_clipped, 0.0, advantage * ratio) / (group * length)
        if cfg.kl_beta and token_total:
            coeffs = coeffs - cfg.kl_beta * (1.0 - np.exp(log_rho)) / token_total
        gradient += sequence_logprob_grad(params, rollout.prompt_tokens, rollout.output_tokens, coeffs)
    return terms, gradient


def grpo_objective(
    rollouts: Sequence[Rollout],
    advantages: Sequence[float],
    params: PolicyParams,
    params_old: Optional[PolicyParams],
    params_ref: PolicyParams,
    cfg: GrpoConfig,
) -> SurrogateTerms:
    terms, _ = objective_and_gradient(rollouts, advantages, params, params_old, params_ref, cfg, with_gradient=False)
    return terms


def grpo_gradient(
    rollouts: Sequence[Rollout],
    advantages: Sequence[float],
    params: PolicyParams,
    params_old: Optional[PolicyParams],
    params_ref: PolicyParams,
    cfg: GrpoConfig,
) -> np.ndarray:
    """Exact gradient of grpo_objective with respect to params.theta"""
    _, gradient = objective_and_gradient(rollouts, advantages, params, params_old, params_ref, cfg)
    return gradient
