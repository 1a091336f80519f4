import pytest
import torch

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)

ACCEPTANCE = {}


def record(criterion, passed: bool, detail: str = ""):
    ACCEPTANCE[criterion] = (passed, detail)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE, key=str):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
