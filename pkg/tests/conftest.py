import numpy as np
import pytest

from placerec.numcore import set_default_dtype


@pytest.fixture(autouse=True)
def _float64():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Report one acceptance criterion as a PASS/FAIL line (shown live and in the summary)."""

    def emit(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {title} [{detail}]"
        _ACCEPTANCE.append(line)
        capman = request.config.pluginmanager.getplugin("capturemanager")
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
