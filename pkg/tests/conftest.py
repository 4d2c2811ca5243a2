import contextlib
import time

ACCEPTANCE_LINES: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float):
    """Time a block and record one PASS/FAIL line for the acceptance summary.

    The block may set ``info["detail"]`` to report measured values.
    """
    info = {"detail": ""}
    t0 = time.perf_counter()
    ok = False
    try:
        yield info
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        within = elapsed < budget_s
        status = "PASS" if ok and within else "FAIL"
        detail = f" {info['detail']}" if info["detail"] else ""
        ACCEPTANCE_LINES.append(
            f"[{status}] criterion {number}: {title} ({elapsed:.1f}s, budget {budget_s:.0f}s){detail}")
    assert within, f"criterion {number} took {elapsed:.1f}s, budget {budget_s}s"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
