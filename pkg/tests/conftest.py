import contextlib
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# one line per acceptance criterion, echoed in the terminal summary so plain `pytest -v` shows them
ACCEPTANCE_LINES: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    """Record PASS/FAIL for one criterion. The body fills ``facts`` and asserts."""
    facts: dict = {}
    t0 = time.perf_counter()
    try:
        yield facts
        elapsed = time.perf_counter() - t0 + facts.pop("extra_seconds", 0.0)
        facts["runtime"] = f"{elapsed:.1f}s"
        if budget_s is not None:
            facts["budget"] = f"{budget_s:g}s"
            assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s:g}s"
    except BaseException as err:
        _record("FAIL", number, title, facts, f"{type(err).__name__}: {err}")
        raise
    _record("PASS", number, title, facts)


def _record(status, number, title, facts, reason=None):
    facts.pop("extra_seconds", None)
    detail = ", ".join(f"{k}={v}" for k, v in facts.items())
    line = f"{status} criterion {number}: {title}" + (f" [{detail}]" if detail else "")
    if reason:
        line += f" -- {reason.splitlines()[0]}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
