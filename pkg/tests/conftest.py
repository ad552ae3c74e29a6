import re

_CRITERION = re.compile(r"test_acceptance\.py.*test_criterion_(\d+)")
_SEVERITY = {"passed": 1, "skipped": 2, "failed": 3, "error": 3}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL/SKIP line per acceptance criterion at the end of the run."""
    results = {}
    for status, severity in _SEVERITY.items():
        for rep in terminalreporter.stats.get(status, []):
            match = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not match:
                continue
            n = int(match.group(1))
            label = {"passed": "PASS", "skipped": "SKIP"}.get(status, "FAIL")
            if label == "SKIP":
                try:
                    label += f" ({rep.longrepr[2]})"
                except Exception:
                    pass
            if n not in results or severity > results[n][0]:
                results[n] = (severity, label)
    if results:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria summary")
        for n in sorted(results):
            terminalreporter.write_line(f"CRITERION {n}: {results[n][1]}")
