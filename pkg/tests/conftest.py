import numpy as np
import pytest

from greenmesh import mesh as M


@pytest.fixture(scope="session")
def grid5():
    m = M.build_perturbed_grid(5, 5, 0.0, 0)
    return m, M.compute_edge_geometry(m)


@pytest.fixture(scope="session")
def jitter12():
    m = M.build_perturbed_grid(12, 12, 0.3, 3)
    return m, M.compute_edge_geometry(m)


@pytest.fixture(scope="session")
def tiny():
    """3x3 mesh with Dirichlet hull: small enough for dense oracles."""
    m = M.build_perturbed_grid(3, 3, 0.0, 0)
    m = m.with_dirichlet(m.boundary)
    return m, M.compute_edge_geometry(m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def _report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
