import numpy as np
import pytest

from lgr.core import PeriodicBox
from lgr.sph import CaseConfig, run_simulation


@pytest.fixture(scope="session")
def unit_box():
    return PeriodicBox((1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def small_tgv():
    """A short N=1000 Taylor-Green run shared by feature, model and rollout tests."""
    cfg = CaseConfig("tgv", n_particles=1000)
    return cfg, run_simulation(cfg, seed=3, n_steps=40)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion and fail on FAIL."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}: {name}: {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
