import os

# one BLAS thread keeps runs bitwise reproducible and avoids oversubscription
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from dimbert import tensor as T
from dimbert.config import ModelConfig
from dimbert.transformer import DiMBERT
from dimbert.world import WorldConfig, default_vocabulary, generate_corpus


@pytest.fixture(autouse=True)
def _double_precision():
    T.set_precision("double")
    yield
    T.set_precision("double")


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def corpus(world):
    return generate_corpus(12, 5, world)


def small_model(mode="DiM", seed=0, d_model=8, n_layers=2, n_heads=2, **kw):
    vocab = default_vocabulary()
    cfg = ModelConfig(vocab_size=len(vocab), d_model=d_model, n_layers=n_layers, n_heads=n_heads, mode=mode,
                      d_r=WorldConfig().d_r, d_c=WorldConfig().d_c, max_positions=40, max_rois=6, **kw)
    return DiMBERT(cfg, vocab, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
