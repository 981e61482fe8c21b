"""Shared pytest hooks.

After the run, print one PASS/FAIL line per acceptance criterion so the
gate's verdict is readable without scrolling through the full test log.
"""

import re

_acceptance = {}


def _criterion_number(name: str) -> int:
    m = re.search(r"criterion_(\d+)", name)
    return int(m.group(1)) if m else 99


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance[name] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        # a fixture error or skip means the criterion was not demonstrated
        _acceptance[name] = "failed"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=_criterion_number):
        tag = "PASS" if _acceptance[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{tag} {name}")
