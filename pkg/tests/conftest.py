import numpy as np
import pytest

from reflectmc.geometry import FixedDomain, TimeVaryingDomain
from reflectmc.problem import CoefficientSet, Problem, SourceData
from reflectmc.sde import SimConfig

# acceptance verdict lines collected by tests/test_acceptance.py::_report;
# echoed in the terminal summary because fd-level capture swallows stdout
ACCEPTANCE_VERDICTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def calib_problem():
    """1D Robin/Dirichlet calibration problem used throughout acceptance."""
    base = FixedDomain(kind="interval", a=0.0, b=1.0,
                       robin_ends=frozenset({"left"}))
    dom = TimeVaryingDomain.build(base, horizon=1.0)
    return Problem(
        domain=dom,
        coeffs=CoefficientSet.parse(1, A=0.5, a_scal="0.25", sigma_rob="1"),
        sources=SourceData.parse(1, f="1", psi="0.5", h="x1*(1-x1)"),
        T=1.0)


@pytest.fixture(scope="session")
def disk_reflecting_problem():
    """Disk with an all-Robin boundary and gamma = 0 (pure reflection)."""
    base = FixedDomain(kind="disk", center=(0.0, 0.0), radius=1.0,
                       robin_arcs=((-np.pi, np.pi),))
    dom = TimeVaryingDomain.build(base, horizon=1.0)
    return Problem(domain=dom, coeffs=CoefficientSet.parse(2, A=0.5),
                   sources=SourceData.parse(2, h="1"), T=1.0)


@pytest.fixture
def quick_cfg():
    return SimConfig(dt=2e-3, master_seed=123)
