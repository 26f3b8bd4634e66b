"""
Rule-based reward gate and group-relative advantage normalization.
"""

from enum import Enum
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class RewardConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_tokens: int = Field(default=4096, ge=1)
    repetition_ngram: int = Field(default=8, ge=2)
    repetition_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    sigma_epsilon: float = Field(default=1e-6, gt=0.0)
    gate_truncated: bool = True


class GateReason(str, Enum):
    OVERLENGTH = "overlength"
    REPETITION = "repetition"


class GateResult(NamedTuple):
    passed: bool
    reason: Optional[GateReason] = None


PASS = GateResult(True)


def repetition_ratio(tokens: Sequence[int], n: int) -> float:
    """1 - distinct n-grams / total n-grams; 0 when there are fewer than n tokens"""
    if n < 2:
        raise ValueError(f"n-gram size must be at least 2, got {n}")
    total = len(tokens) - n + 1
    if total <= 0:
        return 0.0
    ngrams = {tuple(tokens[i:i + n]) for i in range(total)}
    return 1.0 - len(ngrams) / total


def rule_gate(response_tokens: Sequence[int], cfg: RewardConfig, truncated: bool = False) -> GateResult:
    """Zero-reward overlength or repetitive responses before any judge call"""
    if len(response_tokens) > cfg.max_tokens or (truncated and cfg.gate_truncated):
        return GateResult(False, GateReason.OVERLENGTH)
    if repetition_ratio(response_tokens, cfg.repetition_ngram) >= cfg.repetition_threshold:
        return GateResult(False, GateReason.REPETITION)
    return PASS


class GroupRewards(BaseModel):
    """Rewards of the G rollouts sampled for one prompt"""

    model_config = ConfigDict(frozen=True)

    rewards: List[float]
    gated: List[bool]

    @model_validator(mode="after")
    def _check(self):
        if len(self.rewards) != len(self.gated):
            raise ValueError("rewards and gated flags differ in length")
        for reward, gated in zip(self.rewards, self.gated):
            if not 0.0 <= reward <= 100.0:
                raise ValueError(f"reward {reward} outside [0, 100]")
            if gated and reward != 0.0:
                raise ValueError("gated rollouts must have zero reward")
        return self

    @property
    def size(self) -> int:
        return len(self.rewards)


class AdvantageVector(NamedTuple):
    values: np.ndarray
    mean: float
    std: float


def normalize_advantages(group: GroupRewards, sigma_epsilon: float) -> AdvantageVector:
    """
    (R_i - mean) / std with the population std over the group.
    Groups with std <= sigma_epsilon get all-zero advantages.
    """
    rewards = np.asarray(group.rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("cannot normalize an empty group")
    mean = float(rewards.mean())
    std = float(rewards.std())
    if std <= sigma_epsilon:
        return AdvantageVector(np.zeros_like(rewards), mean, std)
    return AdvantageVector((rewards - mean) / std, mean, std)
