def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            if "test_acceptance" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            rows.append((name, "PASS" if rep.passed else "FAIL"))
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, verdict in sorted(rows):
        terminalreporter.write_line(f"{verdict}  {name}")
