import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Acceptance verdicts collected during the session, echoed in the terminal summary.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
