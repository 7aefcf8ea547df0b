import random
from pathlib import Path

import pytest

from splitphe.datasets import load_csv, standardize, train_test_split
from splitphe.paillier import KeyPair, from_primes, keygen

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

# Criterion verdicts from test_acceptance.py land here so they stay visible
# in the terminal summary even when pytest captures passing tests' stdout.
acceptance_verdicts: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def keys512() -> KeyPair:
    # 512-bit keys keep homomorphic tests fast; size floors are tested separately.
    return keygen(512, random.Random(0xC0FFEE))


@pytest.fixture(scope="session")
def tiny_key() -> KeyPair:
    # p=11, q=13: small enough to verify against hand-computed values.
    return from_primes(11, 13)


@pytest.fixture(scope="session")
def iris_full():
    return load_csv(DATA_DIR / "iris.csv", name="iris")


@pytest.fixture(scope="session")
def iris_split(iris_full):
    train, test = train_test_split(iris_full, 0.2, seed=1312)
    return standardize(train, test)
