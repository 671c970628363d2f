import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

from latentdir.generators import make_synthetic_generator
from latentdir.trainer import TrainConfig

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    """Accumulate one clause of acceptance criterion ``n``; the criterion passes only if every clause does."""
    prev_ok, prev = ACCEPTANCE_RESULTS.get(n, (True, ""))
    ACCEPTANCE_RESULTS[n] = (prev_ok and ok, f"{prev}; {detail}" if prev else detail)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth():
    return make_synthetic_generator(7, 8, 4, 64, 2.0)


@pytest.fixture(scope="session")
def small_synth():
    return make_synthetic_generator(3, 4, 3, 32, 2.0)


@pytest.fixture(scope="session")
def recovery_config():
    """Ground-truth recovery run: d=8, F=4, gamma=2, K=4, N=16, alpha=1, tau=0.5."""
    return TrainConfig(batch_size=16, K=4, kind="global", tau=0.5, alpha=1.0, truncation=1.0,
                       lr=1e-3, steps=5000, seed=0)


@pytest.fixture(scope="session")
def recovery_run(synth, recovery_config):
    import time

    from latentdir.trainer import train

    t0 = time.perf_counter()
    dset, trace = train(recovery_config, synth)
    return dset, trace, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
