import numpy as np
import pytest

from read_debias.data import SyntheticTaskSpec, TaskKind, encode_batch, generate
from read_debias.model import ModelConfig, ReadModel

TINY = dict(num_layers=2, num_ensemble_layers=1, model_dim=8, num_heads=2, ffn_dim=16,
            vocab_size=80, max_seq_len=40)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return ReadModel.init(tiny_config, seed=3)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticTaskSpec(task_kind=TaskKind.OVERLAP, vocab_size=80, num_examples=64, seed=11)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate(small_spec)


@pytest.fixture
def tiny_batch(small_dataset):
    return encode_batch(small_dataset.examples[:4], 80, 40)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'} - {detail}")
