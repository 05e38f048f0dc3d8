import hashlib
import os

import numpy as np
import pytest
from hypothesis import settings

from patchifier.config import TrainConfig
from patchifier.model import ModelConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY_KEYS = dict(fe_channels=(2, 2, 2, 2, 2), hidden=8, layers=2, heads=2, ffn=16, max_seq_len=8, dropout=0.0)


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig.tiny()


@pytest.fixture
def tiny_train_cfg():
    def make(**changes) -> TrainConfig:
        base = dict(TINY_KEYS, lr=1e-3, batch_size=8, epochs=1, n_patches=3, crops_per_clip=3)
        base.update(changes)
        return TrainConfig(**base)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def digest(arrays) -> str:
    """Order-sensitive hash of a name -> array mapping (or a list of arrays)."""
    h = hashlib.sha256()
    items = sorted(arrays.items()) if isinstance(arrays, dict) else enumerate(arrays)
    for k, v in items:
        h.update(str(k).encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
