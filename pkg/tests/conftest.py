import pytest

import data_loader
from helpers import make_question
from utils.config import RunConfig
from utils.policy_model import PolicyConfig, Vocab


@pytest.fixture
def synthetic_questions():
    return data_loader.synthetic_corpus()


@pytest.fixture
def vocab(synthetic_questions):
    return Vocab.build(synthetic_questions, 32)


@pytest.fixture
def small_policy():
    return PolicyConfig(vocab_size=32, embed_dim=4, hidden_dim=6, context_window=4, max_len=6, seed=3)


@pytest.fixture
def desk_config():
    return RunConfig.model_validate(
        {
            "grpo": {"epochs": 1, "prompt_batch_size": 8, "group_size": 4},
            "policy": {"max_len": 8},
        }
    )


@pytest.fixture
def four_frame_questions():
    """One question per frame f1..f4 with action labels for balancing"""
    return [
        make_question("q1", "f1", task="behavior", prompt="what next", reference="straight", action="going straight"),
        make_question("q2", "f2", task="behavior", prompt="what next", reference="straight", action="going straight"),
        make_question("q3", "f3", task="behavior", prompt="what next", reference="right", action="steering to the right"),
        make_question("q4", "f4", task="behavior", prompt="what next", reference="straight", action="going straight"),
    ]
