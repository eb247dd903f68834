"""Shared test plumbing: the acceptance-criteria summary block."""

_criterion_lines = []


def record_criterion(number: int, ok: bool, detail: str):
    """Stash a one-line verdict; printed after the run so it survives
    pytest's output capturing."""
    _criterion_lines.append(
        f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
