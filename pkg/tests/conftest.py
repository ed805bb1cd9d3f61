import numpy as np
import pytest

from adapter_splade.encoder import AdapterConfig, EncoderConfig
from adapter_splade.synthetic import SyntheticSpec, generate_synthetic_corpus

TINY = EncoderConfig(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=30, max_seq_len=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_adapters():
    return AdapterConfig(reduction_factor=2)


@pytest.fixture(scope="session")
def small_task():
    """A few-hundred-document synthetic task, shared across tests."""
    spec = SyntheticSpec(vocab_size=300, num_docs=400, num_train=60, num_dev=20, num_test=20, seed=3)
    return generate_synthetic_corpus(spec)


# -- acceptance summary -----------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def report(request):
    """``report(n, title, ok, detail)`` records one pass/fail line per criterion."""
    def _report(n, title, ok, detail=""):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        request.config.stash[_ACCEPTANCE].append(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
