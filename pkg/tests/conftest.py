import pytest

from blockstream.bundle import train_bundle
from blockstream.synth import demo_spec, synth_corpus, synth_trace
from blockstream.trace import FileTable

TRAIN_SEEDS = tuple(range(1, 11))
TEST_SEEDS = (101, 102)


@pytest.fixture(scope="session")
def corpus():
    """Fixed synthetic corpus: 10 training runs, 2 held-out runs, one file table."""
    spec = demo_spec()
    files = FileTable()
    train = synth_corpus(spec, TRAIN_SEEDS, files)
    test = [synth_trace(spec, s, files) for s in TEST_SEEDS]
    return spec, files, train, test


@pytest.fixture(scope="session")
def bundle(corpus):
    return train_bundle(corpus[2])


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
