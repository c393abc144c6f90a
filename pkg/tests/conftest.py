"""Shared test plumbing: the acceptance suite records one line per criterion
and this hook replays them after the run, so pass/fail status is visible even
when pytest captures stdout.
"""

acceptance_lines: list[str] = []


def record_criterion(num: int, name: str, ok: bool, detail: str) -> bool:
    line = f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'} - {detail}"
    acceptance_lines.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
