import pytest

from dualdense.network import NetworkConfig
from dualdense.phantom import PhantomConfig, generate_corpus


@pytest.fixture(scope="session")
def tiny_config():
    return NetworkConfig(growth_rate=4, block_sizes=(1, 1, 1, 1), input_size=(64, 64))


@pytest.fixture(scope="session")
def small_corpus():
    """Ten 96x96 phantoms: big enough to split, small enough to train in seconds."""
    return generate_corpus(PhantomConfig(canvas=(96, 96), count=10, seed=3))


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the outcome line for one acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, _CRITERIA[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
