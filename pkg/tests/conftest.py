import numpy as np
import pytest

from nse.dataset import InteractionDataset, build_graph


def random_dataset(rng, num_users=10, num_items=15, num_edges=40, test_edges=0):
    pairs = {(int(u), int(i)) for u, i in zip(rng.integers(0, num_users, num_edges),
                                              rng.integers(0, num_items, num_edges))}
    pairs = sorted(pairs)
    rng.shuffle(pairs)
    test = pairs[:test_edges]
    train = pairs[test_edges:]
    return InteractionDataset.from_edges(train, test, num_users, num_items)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset(rng):
    return random_dataset(rng, 10, 15, 50, test_edges=8)


@pytest.fixture
def small_graph(small_dataset):
    return build_graph(small_dataset)


def write_split(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
