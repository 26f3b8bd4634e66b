"""
Judge backends mapping (task, question, reference, response) to a quality score in [0, 100].

MockJudge is a deterministic token-F1 scorer used offline and in tests.
HttpJudge sends the routed rubric to an OpenAI-compatible chat-completions endpoint.
"""

import hashlib
import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from joblib import Parallel, delayed
from openai import APIError, OpenAI, OpenAIError
from pydantic import BaseModel, ConfigDict, field_validator

from services.rubric_service import RubricService
from utils.config import JudgeBackend, JudgeConfig, judge_api_key
from utils.schemas import TaskKind, word_tokens

logger = logging.getLogger(__name__)

_INTEGER_PATTERN = re.compile(r"(?<![\d.\-])\d+(?!\d|\.\d)")


class JudgeError(RuntimeError):
    """Raised when a judge cannot produce a score; raw_reply holds unparsable replies"""

    def __init__(self, message: str, raw_reply: Optional[str] = None):
        super().__init__(message)
        self.raw_reply = raw_reply


class JudgeRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    task: TaskKind
    question: str
    reference_answer: str = ""
    response: str = ""

    @field_validator("question")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("question must be non-empty")
        return value

    def cache_key(self, judge_id: str) -> str:
        payload = json.dumps([judge_id, self.model_dump(mode="json")], sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def token_f1(response: str, reference: str) -> float:
    """Bag-of-words F1 between two texts; two empty texts agree perfectly"""
    response_bag = Counter(word_tokens(response))
    reference_bag = Counter(word_tokens(reference))
    if not response_bag and not reference_bag:
        return 1.0
    overlap = sum((response_bag & reference_bag).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(response_bag.values())
    recall = overlap / sum(reference_bag.values())
    return 2 * precision * recall / (precision + recall)


def parse_score(reply: str) -> int:
    """First integer in the reply that lies in [0, 100]"""
    for match in _INTEGER_PATTERN.finditer(reply or ""):
        value = int(match.group())
        if 0 <= value <= 100:
            return value
    raise JudgeError("judge reply holds no integer score in [0, 100]", raw_reply=reply)


class Judge:
    """Base judge: score one request, or many in request order"""

    judge_id = "judge"

    def score(self, request: JudgeRequest) -> float:
        raise NotImplementedError

    def score_many(self, requests: Sequence[JudgeRequest]) -> List[float]:
        return [self.score(request) for request in requests]


class MockJudge(Judge):
    """round(100 * token F1) against the reference answer; counts calls"""

    judge_id = "mock"

    def __init__(self):
        self.calls = 0

    def score(self, request: JudgeRequest) -> float:
        self.calls += 1
        return float(round(100 * token_f1(request.response, request.reference_answer)))


class ScoreCache:
    """JSON file mapping request hashes to scores"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.entries: Dict[str, float] = {}
        if self.path.exists():
            self.entries = json.loads(self.path.read_text(encoding="utf-8"))

    def get(self, key: str) -> Optional[float]:
        return self.entries.get(key)

    def put(self, key: str, score: float) -> None:
        self.entries[key] = score

    def save(self) -> None:
        self.path.write_text(json.dumps(self.entries, sort_keys=True), encoding="utf-8")


class HttpJudge(Judge):
    """Rubric-prompted judge behind an OpenAI-compatible chat endpoint"""

    def __init__(self, cfg: JudgeConfig, rubrics: Optional[RubricService] = None, client: Optional[OpenAI] = None):
        self.cfg = cfg
        self.rubrics = rubrics or RubricService()
        self.judge_id = f"http:{cfg.model}"
        self.cache = ScoreCache(Path(cfg.cache_path)) if cfg.cache_path else None
        if client is None:
            api_key = judge_api_key()
            if not api_key:
                raise JudgeError("JUDGE_API_KEY is not set; the http judge needs a bearer token")
            try:
                client = OpenAI(
                    api_key=api_key,
                    base_url=cfg.url,
                    timeout=cfg.timeout_s,
                    max_retries=cfg.max_retries,
                )
            except OpenAIError as e:
                raise JudgeError(f"cannot create judge client: {e}") from e
        self.client = client

    def _request_score(self, request: JudgeRequest) -> float:
        rubric = self.rubrics.route(
            request.task,
            question=request.question,
            reference=request.reference_answer,
            response=request.response,
        )
        try:
            completion = self.client.chat.completions.create(
                model=self.cfg.model,
                messages=[{"role": "user", "content": rubric.text}],
                temperature=self.cfg.temperature,
            )
        except APIError as e:
            raise JudgeError(f"judge request failed after {self.cfg.max_retries} retries: {e}") from e
        reply = completion.choices[0].message.content if completion.choices else None
        return float(parse_score(reply or ""))

    def score(self, request: JudgeRequest) -> float:
        if not request.response.strip():
            return 0.0
        key = request.cache_key(self.judge_id) if self.cache else None
        if key is not None:
            cached = self.cache.get(key)
            if cached is not None:
                return cached
        value = self._request_score(request)
        if key is not None:
            self.cache.put(key, value)
        return value

    def score_many(self, requests: Sequence[JudgeRequest]) -> List[float]:
        # Threads keep results in request order
        scores = Parallel(n_jobs=min(self.cfg.concurrency, max(len(requests), 1)), prefer="threads")(
            delayed(self.score)(request) for request in requests
        )
        if self.cache is not None:
            self.cache.save()
        return list(scores)


def make_judge(cfg: JudgeConfig) -> Judge:
    if cfg.backend == JudgeBackend.MOCK:
        return MockJudge()
    logger.info(f"Using http judge {cfg.model} at {cfg.url or 'the default endpoint'}")
    return HttpJudge(cfg)


def judge_score(request: JudgeRequest, judge: Judge) -> float:
    value = float(judge.score(request))
    if not 0.0 <= value <= 100.0:
        raise JudgeError(f"{judge.judge_id} returned out-of-range score {value}")
    return value
