import numpy as np
import pytest

from litehtr.curriculum import (
    CurriculumStageSpec,
    TextPool,
    build_stage_dataset,
)
from litehtr.vocab import build_vocabulary


@pytest.fixture(scope="session")
def abc_vocab():
    return build_vocabulary(["abc"])


@pytest.fixture(scope="session")
def word_pool():
    return TextPool.synthetic_words("abcdefghij", 40, word_len=(2, 4), seed=11)


@pytest.fixture(scope="session")
def tiny_block_dataset(tmp_path_factory, word_pool):
    """8 small one-line blocks, shared across tests that need images."""
    out = tmp_path_factory.mktemp("blocks")
    spec = CurriculumStageSpec("s1", 8, (64, 64), (1, 1), (1, 1), seed=3)
    return build_stage_dataset(spec, word_pool, str(out))


def brute_force_distance(hyp: str, ref: str) -> int:
    """Independent exponential-recursion Levenshtein oracle (strings <= 8)."""
    if not hyp:
        return len(ref)
    if not ref:
        return len(hyp)
    return min(
        brute_force_distance(hyp[1:], ref[1:]) + (hyp[0] != ref[0]),
        brute_force_distance(hyp[1:], ref) + 1,
        brute_force_distance(hyp, ref[1:]) + 1,
    )
