import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from samkv.engine import ModelSpec, build_model, prefill_document  # noqa: E402


@pytest.fixture(scope="session")
def tiny():
    return build_model(ModelSpec(num_layers=2, num_heads=2, head_dim=4, vocab_size=64, seed=7))


@pytest.fixture(scope="session")
def small():
    return build_model(ModelSpec(num_layers=3, num_heads=2, head_dim=8, vocab_size=128, seed=3))


@pytest.fixture(scope="session")
def small_abs():
    return build_model(
        ModelSpec(
            num_layers=3,
            num_heads=2,
            head_dim=8,
            vocab_size=128,
            seed=3,
            positional_mode="absolute-learned",
            max_positions=2048,
        )
    )


def make_docs(weights, lengths, seed=0, block_size=16, retain_q=True, keep_attention=True, **kw):
    rng = np.random.default_rng(seed)
    return [
        prefill_document(
            weights,
            rng.integers(0, weights.spec.vocab_size, size=n),
            f"doc{i}",
            block_size=block_size,
            retain_q=retain_q,
            keep_attention=keep_attention,
            **kw,
        )
        for i, n in enumerate(lengths)
    ]
