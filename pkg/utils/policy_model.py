"""
Small autoregressive softmax policy trained by the GRPO loop.

Architecture: mean-pooled embeddings of the last w context tokens -> one tanh
hidden layer -> softmax over the vocabulary. Parameters live in one flat float64
vector so snapshots, optimizer moments and gradients share a layout.
Gradients are exact reverse-mode derivatives written out by hand.
"""

import hashlib
import logging
import os
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import joblib
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from utils.schemas import TASK_ORDER, Question, word_tokens

logger = logging.getLogger(__name__)

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when a vector does not match the parameter layout"""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be read back"""


class PolicyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    vocab_size: int = Field(default=32, ge=3)
    embed_dim: int = Field(default=16, ge=1)
    hidden_dim: int = Field(default=32, ge=1)
    context_window: int = Field(default=8, ge=1)
    max_len: int = Field(default=16, ge=1)
    temperature: float = Field(default=1.0, gt=0.0)
    init_scale: float = Field(default=0.5, ge=0.0)
    # Added to the EOS output bias at init; negative values favor long outputs
    eos_bias: float = 0.0
    seed: int = 0


class Vocab:
    """Dense symbol table; ids 0, 1, 2 are BOS, EOS and UNK"""

    bos_id = 0
    eos_id = 1
    unk_id = 2

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(symbols) < 3 or symbols[:3] != [BOS, EOS, UNK]:
            raise ValueError("vocabulary must start with <bos>, <eos>, <unk>")
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.symbols = symbols
        self.index = {symbol: i for i, symbol in enumerate(symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    @classmethod
    def build(cls, questions: Sequence[Question], size: int) -> "Vocab":
        """Task words first, then corpus words by frequency (ties alphabetical), padded to size"""
        reserved = [BOS, EOS, UNK] + [task.value for task in TASK_ORDER]
        if size < len(reserved):
            raise ValueError(f"vocabulary size {size} cannot hold the {len(reserved)} reserved symbols")
        counts = Counter()
        for question in questions:
            counts.update(word_tokens(question.prompt_text))
            counts.update(word_tokens(question.reference_answer))
        words = [w for w, _ in sorted(counts.items(), key=lambda item: (-item[1], item[0])) if w not in reserved]
        room = size - len(reserved)
        if len(words) > room:
            logger.warning(f"Vocabulary holds {room} corpus words; {len(words) - room} rarer words map to {UNK}")
        symbols = reserved + words[:room]
        symbols += [f"<pad{i}>" for i in range(size - len(symbols))]
        return cls(symbols)

    def encode(self, text: str) -> List[int]:
        return [self.index.get(word, self.unk_id) for word in word_tokens(text)]

    def prompt_tokens(self, question: Question) -> List[int]:
        return [self.bos_id, self.index[question.task.kind.value]] + self.encode(question.prompt_text)

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.symbols[i] for i in ids if i not in (self.bos_id, self.eos_id))


@lru_cache(maxsize=None)
def param_layout(cfg: PolicyConfig) -> Dict[str, Tuple[slice, Tuple[int, ...]]]:
    """Name -> (slice into theta, shape) for every parameter block"""
    shapes = [
        ("embedding", (cfg.vocab_size, cfg.embed_dim)),
        ("w_hidden", (cfg.embed_dim, cfg.hidden_dim)),
        ("b_hidden", (cfg.hidden_dim,)),
        ("w_out", (cfg.hidden_dim, cfg.vocab_size)),
        ("b_out", (cfg.vocab_size,)),
    ]
    layout = {}
    offset = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (slice(offset, offset + size), shape)
        offset += size
    return layout


def param_count(cfg: PolicyConfig) -> int:
    return max(s.stop for s, _ in param_layout(cfg).values())


@dataclass
class PolicyParams:
    """Flat parameter vector plus the config that fixes its layout"""

    config: PolicyConfig
    theta: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        expected = param_count(self.config)
        if self.theta.shape != (expected,):
            raise ShapeError(f"theta has shape {self.theta.shape}, layout needs ({expected},)")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite entries")

    def block(self, name: str) -> np.ndarray:
        region, shape = param_layout(self.config)[name]
        return self.theta[region].reshape(shape)


def init_params(cfg: PolicyConfig) -> PolicyParams:
    """Uniform(-init_scale, init_scale) entries from the seeded generator"""
    n = param_count(cfg)
    if cfg.init_scale == 0.0:
        theta = np.zeros(n, dtype=np.float64)
    else:
        rng = np.random.default_rng(cfg.seed)
        theta = rng.uniform(-cfg.init_scale, cfg.init_scale, size=n)
    if cfg.eos_bias:
        region, _ = param_layout(cfg)["b_out"]
        theta[region.start + Vocab.eos_id] += cfg.eos_bias
    return PolicyParams(cfg, theta)


def snapshot(params: PolicyParams) -> PolicyParams:
    """Deep read-only copy, used as the old and reference policies"""
    theta = params.theta.copy()
    theta.setflags(write=False)
    return PolicyParams(params.config, theta, frozen=True)


class _Forward(NamedTuple):
    context_weights: np.ndarray  # (L, V) mean-pooling weights
    pooled: np.ndarray           # (L, d)
    hidden: np.ndarray           # (L, h)
    logprobs: np.ndarray         # (L, V)


def _context_weights(contexts: Sequence[Sequence[int]], cfg: PolicyConfig) -> np.ndarray:
    weights = np.zeros((len(contexts), cfg.vocab_size), dtype=np.float64)
    for row, context in enumerate(contexts):
        window = list(context)[-cfg.context_window:]
        if window:
            np.add.at(weights[row], window, 1.0 / len(window))
    return weights


def _forward(params: PolicyParams, contexts: Sequence[Sequence[int]], temperature: float) -> _Forward:
    weights = _context_weights(contexts, params.config)
    pooled = weights @ params.block("embedding")
    hidden = np.tanh(pooled @ params.block("w_hidden") + params.block("b_hidden"))
    scaled = (hidden @ params.block("w_out") + params.block("b_out")) / temperature
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    logprobs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return _Forward(weights, pooled, hidden, logprobs)


def _backward(
    params: PolicyParams, cache: _Forward, tokens: Sequence[int], coeffs: np.ndarray, temperature: float
) -> np.ndarray:
    """Sum over rows of coeffs[t] * grad log p(tokens[t] | context t)"""
    probs = np.exp(cache.logprobs)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(tokens)), np.asarray(tokens, dtype=np.int64)] = 1.0
    d_logits = coeffs[:, None] * (onehot - probs) / temperature

    d_hidden = d_logits @ params.block("w_out").T
    d_pre = d_hidden * (1.0 - cache.hidden ** 2)
    d_pooled = d_pre @ params.block("w_hidden").T

    grads = {
        "embedding": cache.context_weights.T @ d_pooled,
        "w_hidden": cache.pooled.T @ d_pre,
        "b_hidden": d_pre.sum(axis=0),
        "w_out": cache.hidden.T @ d_logits,
        "b_out": d_logits.sum(axis=0),
    }
    flat = np.zeros_like(params.theta)
    for name, (region, _) in param_layout(params.config).items():
        flat[region] = grads[name].ravel()
    return flat


def next_token_logprobs(params: PolicyParams, context: Sequence[int], temperature: Optional[float] = None) -> np.ndarray:
    """Log-distribution over the vocabulary after context"""
    temperature = params.config.temperature if temperature is None else temperature
    return _forward(params, [context], temperature).logprobs[0]


def logprob_token(params: PolicyParams, context: Sequence[int], token: int, temperature: Optional[float] = None) -> float:
    if not 0 <= token < params.config.vocab_size:
        raise ValueError(f"token {token} outside vocabulary of size {params.config.vocab_size}")
    return float(next_token_logprobs(params, context, temperature)[token])


def grad_logprob(params: PolicyParams, context: Sequence[int], token: int, temperature: Optional[float] = None) -> np.ndarray:
    """Exact gradient of logprob_token with respect to theta"""
    temperature = params.config.temperature if temperature is None else temperature
    cache = _forward(params, [context], temperature)
    return _backward(params, cache, [token], np.ones(1), temperature)


def _position_contexts(prompt: Sequence[int], output: Sequence[int]) -> List[List[int]]:
    sequence = list(prompt) + list(output)
    return [sequence[: len(prompt) + t] for t in range(len(output))]


def sequence_logprobs(
    params: PolicyParams, prompt: Sequence[int], output: Sequence[int], temperature: Optional[float] = None
) -> np.ndarray:
    """log p(output[t] | prompt, output[:t]) for every position"""
    if not output:
        return np.zeros(0)
    temperature = params.config.temperature if temperature is None else temperature
    cache = _forward(params, _position_contexts(prompt, output), temperature)
    return cache.logprobs[np.arange(len(output)), np.asarray(output, dtype=np.int64)]


def sequence_logprob_grad(
    params: PolicyParams,
    prompt: Sequence[int],
    output: Sequence[int],
    coeffs: np.ndarray,
    temperature: Optional[float] = None,
) -> np.ndarray:
    """Sum_t coeffs[t] * grad log p(output[t] | prefix) in one batched pass"""
    if not output:
        return np.zeros_like(params.theta)
    temperature = params.config.temperature if temperature is None else temperature
    cache = _forward(params, _position_contexts(prompt, output), temperature)
    return _backward(params, cache, output, np.asarray(coeffs, dtype=np.float64), temperature)


@dataclass(frozen=True)
class Rollout:
    """One sampled response with the log-probs recorded by the sampling policy"""

    prompt_id: str
    prompt_tokens: Tuple[int, ...]
    output_tokens: Tuple[int, ...]
    sample_logprobs: Tuple[float, ...]
    truncated: bool

    @property
    def response_tokens(self) -> Tuple[int, ...]:
        """Output without the terminating EOS"""
        if self.output_tokens and self.output_tokens[-1] == Vocab.eos_id:
            return self.output_tokens[:-1]
        return self.output_tokens


def _stable_id(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def rollout_seed(master_seed: int, prompt_id: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, _stable_id(prompt_id), index])


def _draw(logprobs: np.ndarray, rng: np.random.Generator) -> int:
    cumulative = np.cumsum(np.exp(logprobs))
    token = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(token, len(logprobs) - 1)


def sample_sequence(
    params: PolicyParams,
    prompt_tokens: Sequence[int],
    rng: np.random.Generator,
    max_len: int,
    temperature: float,
) -> Tuple[List[int], List[float], bool]:
    tokens: List[int] = []
    logprobs: List[float] = []
    context = list(prompt_tokens)
    for _ in range(max_len):
        dist = next_token_logprobs(params, context, temperature)
        token = _draw(dist, rng)
        tokens.append(token)
        logprobs.append(float(dist[token]))
        context.append(token)
        if token == Vocab.eos_id:
            return tokens, logprobs, False
    return tokens, logprobs, True


def sample_group(
    params: PolicyParams,
    prompt_tokens: Sequence[int],
    group_size: int,
    cfg: PolicyConfig,
    master_seed: int,
    prompt_id: str,
) -> List[Rollout]:
    """
    Sample group_size rollouts until EOS or cfg.max_len.
    Rollout i draws from its own generator seeded by (master_seed, prompt_id, i).
    """
    if group_size < 1:
        raise ValueError(f"group size must be at least 1, got {group_size}")
    rollouts = []
    for index in range(group_size):
        rng = np.random.default_rng(rollout_seed(master_seed, prompt_id, index))
        tokens, logprobs, truncated = sample_sequence(params, prompt_tokens, rng, cfg.max_len, cfg.temperature)
        rollouts.append(Rollout(prompt_id, tuple(prompt_tokens), tuple(tokens), tuple(logprobs), truncated))
    return rollouts


def greedy_decode(params: PolicyParams, prompt_tokens: Sequence[int], max_len: int) -> List[int]:
    """Argmax decoding until EOS or max_len"""
    tokens: List[int] = []
    context = list(prompt_tokens)
    for _ in range(max_len):
        token = int(np.argmax(next_token_logprobs(params, context, 1.0)))
        tokens.append(token)
        context.append(token)
        if token == Vocab.eos_id:
            break
    return tokens


@dataclass
class AdamState:
    """First/second moment estimates; updated in place by apply_update"""

    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    @classmethod
    def for_params(cls, params: PolicyParams, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(params.theta), v=np.zeros_like(params.theta), **hyper)


def apply_update(params: PolicyParams, loss_gradient: np.ndarray, state: AdamState) -> PolicyParams:
    """
    One Adam descent step on the loss (the negated objective).
    Returns new params; the optimizer moments advance in place.
    """
    if params.frozen:
        raise ValueError("cannot update a frozen snapshot")
    loss_gradient = np.asarray(loss_gradient, dtype=np.float64)
    if loss_gradient.shape != params.theta.shape:
        raise ShapeError(f"gradient shape {loss_gradient.shape} does not match theta {params.theta.shape}")
    if state.m is None or state.v is None:
        state.m = np.zeros_like(params.theta)
        state.v = np.zeros_like(params.theta)
    if state.m.shape != params.theta.shape or state.v.shape != params.theta.shape:
        raise ShapeError("optimizer state does not match theta")

    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * loss_gradient
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * loss_gradient ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    theta = params.theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return PolicyParams(params.config, theta)


class Checkpoint(NamedTuple):
    params: PolicyParams
    vocab: Vocab
    optimizer: AdamState
    step: int
    epoch: int


def save_checkpoint(path: os.PathLike, params: PolicyParams, vocab: Vocab, optimizer: AdamState, step: int, epoch: int = 0) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "policy_config": params.config.model_dump(),
        "vocab": list(vocab.symbols),
        "theta": np.array(params.theta, dtype=np.float64),
        "optimizer": {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "m": None if optimizer.m is None else np.array(optimizer.m),
            "v": None if optimizer.v is None else np.array(optimizer.v),
            "t": optimizer.t,
        },
        "step": int(step),
        "epoch": int(epoch),
    }
    joblib.dump(payload, path)
    logger.info(f"Checkpoint saved to {path}")


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    try:
        payload = joblib.load(path)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a version {CHECKPOINT_FORMAT_VERSION} checkpoint")
    config = PolicyConfig.model_validate(payload["policy_config"])
    params = PolicyParams(config, np.asarray(payload["theta"], dtype=np.float64))
    vocab = Vocab(payload["vocab"])
    if vocab.size != config.vocab_size:
        raise CheckpointError(f"{path}: vocabulary has {vocab.size} symbols, config says {config.vocab_size}")
    optimizer = AdamState(**payload["optimizer"])
    return Checkpoint(params, vocab, optimizer, payload["step"], payload["epoch"])
