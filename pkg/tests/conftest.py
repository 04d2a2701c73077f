import numpy as np
import pytest

from xmatch.data import ImageRecord
from xmatch.model import ModelConfig
from xmatch.tokenizer import Vocabulary
from xmatch.training import TINY_CONFIG

# Small hand-built vocabulary used by the tokenizer traces.
TRACE_TOKENS = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]",
    "play", "##er", "##ers", "##s", "game", "games", "puzzle", "un", "##aff", "##able",
    "!", "?", "-", "a", "b", "##b", "fun", "free", "run", "##ning", "##n", "r",
]


@pytest.fixture
def trace_vocab():
    return Vocabulary(TRACE_TOKENS)


@pytest.fixture
def tiny_config():
    return ModelConfig(seed=3, **TINY_CONFIG)


def random_record(rng, image_id, n, d_feat):
    xy = rng.uniform(0.0, 0.5, size=(n, 2))
    wh = rng.uniform(0.05, 0.5, size=(n, 2))
    return ImageRecord(image_id, np.concatenate([xy, xy + wh], axis=1), rng.normal(size=(n, d_feat)))
