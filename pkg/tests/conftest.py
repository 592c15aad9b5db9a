import pytest

from rsym.model import TransformerConfig

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_cfg():
    return TransformerConfig(n_layers=1, n_heads=2, d_model=4, d_head=2, d_ff=6, vocab_size=7, n_classes=3, seq_len=4)


@pytest.fixture
def small_cfg():
    return TransformerConfig(n_layers=2, n_heads=2, d_model=8, d_head=4, d_ff=12, vocab_size=16, n_classes=3, seq_len=6)


@pytest.fixture
def acceptance_log():
    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
