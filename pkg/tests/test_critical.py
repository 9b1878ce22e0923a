import json

import numpy as np
import pytest

from weakkam.critical import (
    CriticalCertificate,
    SandwichError,
    assemble_certificate,
    c_longtime,
    c_lower_subsolution,
    c_upper_measure,
    fourier_gradient_basis,
    fourier_modes,
    fourier_values,
    mane_potential,
)
from weakkam.lax_oleinik import SemiLagrangian, ergodic_iteration
from weakkam.measures import solve_mather_lp
from weakkam.sr_structure import ControlGrid, TorusGrid

from conftest import setup


def test_fourier_modes_half_space():
    m = fourier_modes(2, 1)
    assert len(m) == 4
    assert {tuple(k) for k in m} == {(0, 1), (1, -1), (1, 0), (1, 1)}
    assert len(fourier_modes(2, 3)) == (7**2 - 1) // 2


def test_fourier_gradient_matches_finite_differences(rng):
    modes = fourier_modes(2, 2)
    coeffs = rng.normal(size=2 * len(modes))
    x = rng.random((20, 2))
    B = fourier_gradient_basis(x, modes, normalise=True)
    grad = np.einsum("npd,p->nd", B, coeffs)
    e = 1e-6
    for a in range(2):
        dx = np.zeros(2)
        dx[a] = e
        fd = (fourier_values(x + dx, modes, coeffs, True) - fourier_values(x - dx, modes, coeffs, True)) / (2 * e)
        assert np.allclose(fd, grad[:, a], atol=1e-6)
    # normalised basis: sup |D phi_k| = 1
    Bn = fourier_gradient_basis(TorusGrid(2, 64).nodes(), modes, normalise=True)
    assert np.allclose(np.linalg.norm(Bn, axis=2).max(axis=0), 1.0, atol=1e-2)


def test_longtime_examples():
    grid, sys, spec, ctrl = setup(16)
    assert c_longtime(2.0, 0.04, spec, sys, ctrl, grid)[0] == 0.0
    grid, sys, spec, ctrl = setup(16, G=0.7)
    assert c_longtime(2.0, 0.04, spec, sys, ctrl, grid)[0] == pytest.approx(0.7, abs=1e-12)


def test_longtime_two_bump_and_agreement_with_ergodic():
    grid, sys, spec, ctrl = setup(32, G="two-bump", n_u=21)
    c_long, _ = c_longtime(20.0, 0.02, spec, sys, ctrl, grid)
    assert abs(c_long) <= 0.05
    erg = ergodic_iteration(0.02, 1e-4, 40000, spec, sys, ctrl, grid)
    assert abs(c_long - erg.c) <= 2 / 20.0 + 1e-4


def test_subsolution_examples():
    grid, sys, spec, ctrl = setup(16)
    assert c_lower_subsolution(0, spec, sys, grid).c_lb == 0.0
    grid, sys, spec, ctrl = setup(16, G=0.3)
    assert c_lower_subsolution(0, spec, sys, grid).c_lb == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        c_lower_subsolution(-1, spec, sys, grid)


def test_subsolution_monotone_in_modes_and_shift():
    grid, sys, spec, ctrl = setup(16, G="sin2", V=[0.5, 0.2], n_u=21)
    r = c_lower_subsolution(3, spec, sys, grid, iters=100, restarts=3)
    vals = [v for _, v in r.per_K]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] > vals[0]
    # sin2 with constant drift: min over the line x1 = 0 of V1^2/2 + G gives 0.125
    assert r.c_lb <= 0.125 + 1e-6
    r_shift = c_lower_subsolution(3, spec.shifted(0.4), sys, grid, iters=100, restarts=3)
    assert r_shift.c_lb == pytest.approx(r.c_lb + 0.4, abs=1e-9)


def test_subsolution_two_bump_close_to_ergodic():
    grid, sys, spec, ctrl = setup(32, G="two-bump", n_u=21)
    erg = ergodic_iteration(0.02, 1e-4, 40000, spec, sys, ctrl, grid)
    assert abs(c_lower_subsolution(3, spec, sys, grid, iters=100).c_lb - erg.c) <= 0.1


def test_subsolution_divergence_is_reported():
    grid, sys, spec, ctrl = setup(16, G="sin2", V=[0.5, 0.2])
    with pytest.raises(FloatingPointError):
        c_lower_subsolution(1, spec, sys, grid, iters=50, restarts=1, step0=1e4, max_coeff=10.0)


def test_shift_equivariance_of_all_estimators():
    grid, sys, spec, ctrl = setup(16, G="two-bump", n_u=11)
    a = 0.25
    out = []
    for sp in (spec, spec.shifted(a)):
        lp = solve_mather_lp(TorusGrid(2, 8), ControlGrid(2, ctrl.radius, 5), 2, sp, sys)
        out.append(np.array([
            c_longtime(4.0, 0.04, sp, sys, ctrl, grid)[0],
            ergodic_iteration(0.04, 1e-6, 20000, sp, sys, ctrl, grid).c,
            c_lower_subsolution(2, sp, sys, grid, iters=50, restarts=2).c_lb,
            c_upper_measure(lp),
        ]))
    assert np.allclose(out[1] - out[0], a, atol=1e-6)


def test_mane_potential_examples():
    grid, sys, spec, ctrl = setup(16, n_u=11)
    op = SemiLagrangian(grid, sys, spec, ctrl, 0.04)
    assert mane_potential([0.0, 0.0], 0.0, op, 2.0).flat[0] == 0.0
    grid, sys, spec, ctrl = setup(16, G="two-bump", n_u=11)
    op = SemiLagrangian(grid, sys, spec, ctrl, 0.04)
    c = ergodic_iteration(0.04, 1e-6, 20000, spec, sys, ctrl, grid).c
    for x in ([0.0, 0.0], [0.5, 0.5], [0.25, 0.75]):
        phi = mane_potential(x, c, op, 4.0, t_grid=[0.04 * 2**k for k in range(7)])
        assert phi.flat[grid.nearest_node(x)] <= 1e-12


def test_mane_potential_flat_quadratic_vanishes():
    maxes = []
    for T in (2.0, 10.0):
        grid, sys, spec, ctrl = setup(16, "riemannian-identity", n_u=11)
        op = SemiLagrangian(grid, sys, spec, ctrl, 0.04)
        maxes.append(mane_potential([0.0, 0.0], 0.0, op, T).flat.max())
    assert maxes[1] < maxes[0] and maxes[1] <= 2 * (1 / 16)


def test_certificate_sandwich():
    cert = assemble_certificate(0.0, 0.01, 0.0, 0.05, {"n": 16}, 0.02)
    assert cert.gap == 0.05 and cert.check() == []
    json.dumps(cert.to_dict())
    with pytest.raises(SandwichError, match="refine"):
        assemble_certificate(0.0, 0.3, 0.0, 0.05, {"n": 16}, 0.02)
    loose = assemble_certificate(0.0, 0.3, 0.0, 0.05, {"n": 16}, 0.02, strict=False)
    assert isinstance(loose, CriticalCertificate) and loose.check()
