"""Shared pytest wiring.

The acceptance suite (test_acceptance.py) gets a verdict block at the
end of the terminal output: one PASS/FAIL line per criterion.
"""
import re


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdict = {}
    for status, label in (("passed", "PASS"), ("skipped", "SKIP"),
                          ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid:
                continue
            # a failure in any phase beats a pass in another
            if verdict.get(nodeid) != "FAIL":
                verdict[nodeid] = label
    if not verdict:
        return

    def sort_key(nodeid):
        m = re.search(r"criterion_(\d+)", nodeid)
        return (int(m.group(1)) if m else 99, nodeid)

    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(verdict, key=sort_key):
        name = nodeid.split("::")[-1]
        m = re.match(r"test_criterion_(\d+)_(\w+)", name)
        label = (f"criterion {m.group(1)} ({m.group(2).replace('_', ' ')})"
                 if m else name)
        terminalreporter.write_line(f"{label}: {verdict[nodeid]}")
