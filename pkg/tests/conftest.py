import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DESK_SEED = 2024
SPLIT_SEED = 0
TRAIN_SEED = 0

ACCEPTANCE: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or dataset runs")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"C{number} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append(line)
    print(line)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_dataset():
    """Desk corpus: 3 Fock grids x qlp {0, .25, .75, 1} x events 1k..10k x 50 measurements."""
    from fockml import dataset as D

    ds, _ = D.build(D.desk_grid(), 50, DESK_SEED)
    return ds


@pytest.fixture(scope="session")
def desk_split(desk_dataset):
    from fockml import dataset as D

    return D.split(desk_dataset, (0.70, 0.20, 0.10), SPLIT_SEED)


@pytest.fixture(scope="session")
def desk_model(desk_split):
    from fockml import cnn

    train, val, _ = desk_split
    return cnn.train(train, val, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def extended_split(desk_dataset):
    """Desk corpus plus events 100..900; the short-record cases are generated alone
    and appended, which is byte-identical to generating the extended grid at once."""
    from fockml import dataset as D

    short = [c for c in D.desk_grid(extended=True) if c.num_events < 1000]
    extra, _ = D.build(short, 50, DESK_SEED)
    full = D.Dataset.concatenate([extra, desk_dataset])
    return D.split(full, (0.70, 0.20, 0.10), SPLIT_SEED)
