import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from weakkam.lagrangian import (
    LagrangianSpec,
    constant_drift,
    constant_potential,
    control_radius_bound,
    potential_by_name,
    zero_drift,
)
from weakkam.sr_structure import ControlGrid, TorusGrid, frame_by_name


def mane(grid, G="zero", V=None, m=2, shift=0.0):
    """Mane spec from a potential name or constant and an optional constant drift."""
    Gf = constant_potential(G) if isinstance(G, (int, float)) else potential_by_name(G)
    Vf = zero_drift(m) if V is None else constant_drift(V)
    return LagrangianSpec.mane(Vf, Gf, grid, m, shift=shift, names={"V": V, "G": G})


def setup(n=16, frame="grushin-periodic", G="zero", V=None, n_u=11, radius=None):
    grid = TorusGrid(2, n)
    sys = frame_by_name(frame, 2)
    spec = mane(grid, G, V, sys.m)
    R = control_radius_bound(spec) if radius is None else radius
    return grid, sys, spec, ControlGrid(sys.m, R, n_u)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{criterion}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
