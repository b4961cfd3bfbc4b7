import pytest

from soundalign.training import generate_synthetic_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """3 classes x 10 clips of 0.5 s; quick enough for loop-level tests."""
    return generate_synthetic_corpus(3, 10, seed=5, duration=0.5, val_fraction=0.2)


@pytest.fixture(scope="session")
def corpus5():
    return generate_synthetic_corpus(5, 40, seed=0)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
