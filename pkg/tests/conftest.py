import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedchem.dataset import PRESETS
from fedchem.experiment import Prepared

settings.register_profile("fedchem", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fedchem")


@pytest.fixture(scope="session")
def freesolv():
    return Prepared.from_spec(PRESETS["freesolv"])


@pytest.fixture(scope="session")
def esol():
    return Prepared.from_spec(PRESETS["esol"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy50(freesolv):
    """First 50 FreeSolv molecules with standardized targets."""
    from fedchem.dataset import TargetScaler, labeled_graphs

    ds = freesolv.dataset
    idx = list(range(50))
    scaler = TargetScaler.fit(ds.y[idx], ds.mask[idx], "regression")
    return labeled_graphs(ds, idx, scaler, feats=freesolv.feats)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """record(number, title, ok, detail): log a PASS/FAIL line for the summary, then assert."""
    lines = request.config.acceptance_lines

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
