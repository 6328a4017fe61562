"""Shared pytest hooks: print the release-gate summary after a run."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One verdict line per release-gate check, after the usual report."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.write_sep("=", "release gate")
    for num, label in mod.CRITERIA:
        got = mod.RESULTS.get(num)
        if got is None:
            terminalreporter.write_line(f"[{num}] {label}: NOT RUN")
            continue
        ok, detail = got
        line = f"[{num}] {label}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
