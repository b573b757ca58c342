"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary.

Tests marked ``@pytest.mark.criterion(n)`` report their outcome under
criterion ``n``; tests may attach a ``("detail", text)`` user property.
Criterion 10 is judged from the whole session: every non-acceptance test
must pass and the session must finish within the runtime budget.
"""

import time

import pytest

SESSION_BUDGET_S = 45 * 60
ACCEPTANCE_FILE = "test_acceptance.py"

_start = time.monotonic()
_criteria: dict[int, list] = {}
_invariants = {"passed": 0, "failed": 0}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _criteria.setdefault(mark.args[0], []).append((rep.passed, rep.duration, detail, item.name))
    elif not item.nodeid.split("::")[0].endswith(ACCEPTANCE_FILE):
        _invariants["passed" if rep.passed or rep.skipped else "failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria and not any(_invariants.values()):
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 10):
        runs = _criteria.get(n)
        if not runs:
            tr.write_line(f"criterion {n}: NOT RUN")
            continue
        ok = all(r[0] for r in runs)
        secs = sum(r[1] for r in runs)
        details = "; ".join(r[2] for r in runs if r[2])
        failed = ", ".join(r[3] for r in runs if not r[0])
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({secs:.1f}s)"
        if details:
            line += f" {details}"
        if failed:
            line += f" failed: {failed}"
        tr.write_line(line)
    elapsed = time.monotonic() - _start
    n_pass, n_fail = _invariants["passed"], _invariants["failed"]
    if n_pass + n_fail == 0:
        tr.write_line("criterion 10: NOT RUN (invariant suites not collected)")
    else:
        ok = n_fail == 0 and elapsed < SESSION_BUDGET_S
        tr.write_line(
            f"criterion 10: {'PASS' if ok else 'FAIL'} ({n_pass} invariant tests passed, {n_fail} failed; "
            f"session {elapsed:.0f}s of {SESSION_BUDGET_S}s)"
        )
