import contextlib

CRITERIA: dict[str, tuple[str, str]] = {}


@contextlib.contextmanager
def criterion(key: str, title: str):
    """Record PASS/FAIL for an acceptance criterion; failures still propagate."""
    try:
        yield
    except BaseException as exc:
        if type(exc).__name__ in ("Skipped", "XFailed"):
            raise
        detail = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        CRITERIA[key] = ("FAIL", f"{title} :: {detail}")
        raise
    CRITERIA[key] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        status, text = CRITERIA[key]
        terminalreporter.write_line(f"[{status}] criterion {key}: {text}")
