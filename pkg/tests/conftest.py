from pathlib import Path

import numpy as np
import pytest

from doclab import numcore as nc
from doclab.policy import PolicyConfig, init_base, inject_adapters
from doclab.synthdocs import GenConfig, build_vocab, generate

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


def tiny_config(vocab_size, dtype="float64", **kw):
    base = dict(
        vocab_size=vocab_size,
        context_length=64,
        d_model=16,
        n_layers=2,
        n_heads=2,
        lora_rank=2,
        lora_alpha=4.0,
        dtype=dtype,
    )
    base.update(kw)
    return PolicyConfig(**base)


def randomize_adapters(store, seed=0, std=0.1):
    """Give B a non-zero value so adapters actually change the function."""
    rng = np.random.default_rng(seed)
    for pair in store.adapters.values():
        pair.B.data = rng.normal(0.0, std, pair.B.shape).astype(pair.B.dtype)
    return store


@pytest.fixture
def tiny_store(vocab):
    return inject_adapters(init_base(tiny_config(len(vocab)), seed=1), seed=2)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(GenConfig(seed=3, train_per_class=4, test_per_class=2, doc_len=12))


@pytest.fixture(autouse=True)
def _finite_checks():
    prev = nc.set_check_finite(True)
    yield
    nc.set_check_finite(prev)


# one verdict line per acceptance criterion, printed after the test run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = f"{'PASS' if ok else 'FAIL'} criterion {criterion:2d}: {detail}"
        print(ACCEPTANCE[criterion])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
