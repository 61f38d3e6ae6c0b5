import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = []


class AcceptanceLog:
    def record(self, number: int, name: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((number, name, bool(passed), detail))
        line = f"ACCEPTANCE {number} {name}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line, flush=True)
        return bool(passed)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(
            f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}")
