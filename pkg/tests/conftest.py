import pytest

ACCEPTANCE_IDS = ["1", "2", "3", "4", "5", "6", "7a", "7b", "8", "9", "10", "11"]
_results: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one acceptance outcome, then assert it."""

    def check(cid: str, ok: bool, detail: str, elapsed: float, limit: float):
        in_time = elapsed < limit
        _results[cid] = (ok and in_time, f"{detail}; {elapsed:.2f}s (limit {limit:g}s)")
        assert in_time, f"criterion {cid} took {elapsed:.2f}s, limit {limit:g}s"
        assert ok, f"criterion {cid}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    ran = [cid for cid in ACCEPTANCE_IDS if cid in _results]
    if not ran and not any("test_acceptance" in str(getattr(r, "nodeid", ""))
                           for rs in terminalreporter.stats.values() for r in rs):
        return
    terminalreporter.section("acceptance criteria")
    for cid in ACCEPTANCE_IDS:
        if cid in _results:
            ok, detail = _results[cid]
            terminalreporter.write_line(f"criterion {cid:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {cid:>3}: FAIL  (did not run to completion)")
