import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record (and echo) one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_VERDICTS]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number, title, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}; {detail}"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
