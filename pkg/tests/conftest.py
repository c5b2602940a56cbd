import time

import numpy as np
import pytest

from finemoe.data import Corpus
from finemoe.model import MoETransformer, preset
from finemoe.train import TrainConfig, train

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}
TIMINGS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {name}: {detail}")


def rel_err(a, b) -> float:
    """Norm-wise relative error, with a floor so all-zero pairs compare equal."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_corpus():
    return Corpus.synthetic(40_000, seed=0)


@pytest.fixture(scope="session")
def desk_runs(desk_corpus):
    """Paired 200-step desk runs (alpha1 = 0 and 0.01) from the same seed."""
    runs = {}
    t0 = time.perf_counter()
    for alpha in (0.0, 0.01):
        model = MoETransformer(preset("desk"), seed=0)
        runs[alpha] = train(model, desk_corpus, TrainConfig(total_steps=200, seed=0, alpha1=alpha))
    TIMINGS["desk_runs"] = time.perf_counter() - t0
    return runs


@pytest.fixture(scope="session")
def trained_desk(desk_runs):
    return desk_runs[0.01].model
