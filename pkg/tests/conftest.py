import numpy as np
import pytest

from rsl_lab.corpus import SyntheticTaskSpec, generate_task

from helpers import ACCEPTANCE, tiny_model


@pytest.fixture
def tiny_pair():
    return tiny_model(seed=3), tiny_model(seed=4)


@pytest.fixture(scope="session")
def small_task():
    return generate_task(SyntheticTaskSpec(vocab_size=8, max_len=6, pairs=300, mono=100, heldout=60, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
