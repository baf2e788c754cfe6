import numpy as np
import pytest

from trilattice.optimizer import DesignField


def make_design(active, alpha, theta3, cell_size=1.0):
    """Design field with per-cell (or broadcast) widths and orientation."""
    active = np.asarray(active, dtype=bool)
    n = int(active.sum())
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (n, 3)).copy()
    theta3 = np.broadcast_to(np.asarray(theta3, dtype=float), (n,)).copy()
    ny, nx = active.shape
    return DesignField(
        shape=(nx, ny),
        active=active,
        x_alpha=alpha.copy(),
        x_theta=theta3.copy(),
        alpha=alpha,
        theta=theta3,
        cell_size=cell_size,
    )


@pytest.fixture
def design_factory():
    return make_design


@pytest.fixture(scope="session")
def uniform_block():
    """A 40 x 30 block with constant widths and orientation."""
    return make_design(np.ones((30, 40), bool), (0.2, 0.25, 0.3), 0.2)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line for a numbered acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
