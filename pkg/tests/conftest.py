import numpy as np
import pytest

from kgquant.kg import KnowledgeGraph, build_adjacency, synth_kg


def make_kg(train, entity_count=None, relation_count=None, valid=(), test=()):
    train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
    if entity_count is None:
        entity_count = int(max(train[:, 0].max(), train[:, 2].max())) + 1
    if relation_count is None:
        relation_count = int(train[:, 1].max()) + 1
    kg = KnowledgeGraph(
        entity_labels=tuple(f"e{i}" for i in range(entity_count)),
        relation_labels=tuple(f"r{i}" for i in range(relation_count)),
        train=train,
        valid=np.asarray(valid, dtype=np.int64).reshape(-1, 3),
        test=np.asarray(test, dtype=np.int64).reshape(-1, 3),
    )
    return build_adjacency(kg)


@pytest.fixture
def star_kg():
    # hub 0 touches relations 0..4, one leaf each
    return make_kg([(0, r, r + 1) for r in range(5)])


@pytest.fixture(scope="session")
def skewed_kg():
    return synth_kg(1, 60, 6, 400, 1.0)


# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
