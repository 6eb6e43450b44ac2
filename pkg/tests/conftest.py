import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nnfabric import LMConfig, build_toy_lm, wrap

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

TOY = dict(vocab_size=32, d_model=16, n_layers=2, n_heads=2, max_seq_len=16, seed=42)


@pytest.fixture(scope="session")
def toy_cfg():
    return LMConfig(**TOY)


@pytest.fixture
def lm(toy_cfg):
    return wrap(build_toy_lm(toy_cfg))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_prompt(rng, lo=1, hi=8, vocab=32):
    n = int(rng.integers(lo, hi + 1))
    return [int(t) for t in rng.integers(1, vocab, size=n)]


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(test_acceptance.RESULTS):
        terminalreporter.write_line(test_acceptance.RESULTS[n])
