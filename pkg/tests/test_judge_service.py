from types import SimpleNamespace

import httpx
import pytest
from openai import APIConnectionError

from services.judge_service import (
    HttpJudge,
    JudgeError,
    JudgeRequest,
    MockJudge,
    judge_score,
    make_judge,
    parse_score,
    token_f1,
)
from utils.config import JudgeConfig


def _request(response, reference="turn left", task="planning"):
    return JudgeRequest(task=task, question="what should the ego car do", reference_answer=reference, response=response)


def test_mock_judge_examples():
    judge = MockJudge()
    assert judge_score(_request("turn left"), judge) == 100
    assert judge_score(_request("go straight"), judge) == 0
    assert judge_score(_request("turn left now"), judge) == 80
    assert judge.calls == 3


def test_token_f1_is_symmetric():
    pairs = [("turn left now", "turn left"), ("a b b c", "b c d"), ("x", "x y z")]
    for a, b in pairs:
        assert token_f1(a, b) == pytest.approx(token_f1(b, a))


def test_parse_score():
    assert parse_score("Score: 85.") == 85
    assert parse_score("I rate it 150, no, 72") == 72
    assert parse_score("0") == 0
    assert parse_score("score -5 then 100") == 100
    assert parse_score("between -3 and 40") == 40
    with pytest.raises(JudgeError) as info:
        parse_score("excellent answer")
    assert info.value.raw_reply == "excellent answer"


def test_request_requires_question():
    with pytest.raises(ValueError):
        JudgeRequest(task="behavior", question="  ", response="x")


class _FakeCompletions:
    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def create(self, model, messages, temperature):
        self.prompts.append(messages[0]["content"])
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return SimpleNamespace(choices=[SimpleNamespace(message=SimpleNamespace(content=reply))])


def _http_judge(replies, **cfg):
    completions = _FakeCompletions(replies)
    client = SimpleNamespace(chat=SimpleNamespace(completions=completions))
    return HttpJudge(JudgeConfig(backend="http", **cfg), client=client), completions


def test_http_judge_sends_routed_rubric():
    judge, completions = _http_judge(["The answer deserves 64 points."])
    assert judge_score(_request("keep lane", task="behavior"), judge) == 64.0
    assert "behavioral understanding" in completions.prompts[0]
    assert "keep lane" in completions.prompts[0]


def test_http_judge_unparsable_reply():
    judge, _ = _http_judge(["no idea"])
    with pytest.raises(JudgeError) as info:
        judge.score(_request("keep lane"))
    assert info.value.raw_reply == "no idea"


def test_http_judge_transport_failure():
    error = APIConnectionError(request=httpx.Request("POST", "http://judge/chat/completions"))
    judge, _ = _http_judge([error])
    with pytest.raises(JudgeError, match="failed"):
        judge.score(_request("keep lane"))


def test_http_judge_score_many_keeps_order():
    judge, _ = _http_judge(["10", "20", "30"], concurrency=1)
    requests = [_request(f"answer {i}") for i in range(3)]
    assert judge.score_many(requests) == [10.0, 20.0, 30.0]


def test_http_judge_cache(tmp_path):
    cache = tmp_path / "cache.json"
    judge, completions = _http_judge(["55"], cache_path=str(cache), concurrency=1)
    assert judge.score_many([_request("keep lane")]) == [55.0]
    again, second = _http_judge([], cache_path=str(cache))
    assert again.score(_request("keep lane")) == 55.0
    assert second.prompts == []


def test_http_judge_needs_api_key(monkeypatch, tmp_path):
    monkeypatch.delenv("JUDGE_API_KEY", raising=False)
    monkeypatch.chdir(tmp_path)
    with pytest.raises(JudgeError, match="JUDGE_API_KEY"):
        make_judge(JudgeConfig(backend="http"))


def test_make_judge_mock():
    assert isinstance(make_judge(JudgeConfig()), MockJudge)
