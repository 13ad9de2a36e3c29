import sys


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail = results[n]
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{extra}]" if extra else ""))
