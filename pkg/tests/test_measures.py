import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakkam.lax_oleinik import ergodic_iteration
from weakkam.measures import (
    DiscreteMeasure,
    closedness_residual,
    closedness_vector,
    default_test_family,
    graph_check,
    inclusion_check,
    mather_set,
    occupation_measure,
    one_sided_derivative,
    read_measure,
    solve_mather_lp,
    strong_closedness_residual,
    weak_duality_bound,
    write_measure,
)
from weakkam.lagrangian import moment_cap
from weakkam.sr_structure import ControlGrid, ScalarField, TorusGrid, grushin_periodic, torus_difference

from conftest import setup


def _lp(G="sin2", V=None, shift=0.0, n_lp=8, K=3):
    grid, sys, spec, ctrl = setup(16, G=G, V=V, n_u=21)
    if shift:
        spec = spec.shifted(shift)
    return grid, sys, spec, ctrl, solve_mather_lp(TorusGrid(2, n_lp), ControlGrid(2, ctrl.radius, 5), K, spec, sys)


def test_measure_validation():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((2, 2)), np.zeros((2, 2)), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((2, 2)), np.zeros((2, 2)), np.array([1.5, -0.5]))
    mu = DiscreteMeasure.point_mass([0.1, 0.2], [1.0, 2.0])
    assert mu.sigma_moment == pytest.approx(5.0)


def test_closedness_examples():
    sys = grushin_periodic()
    assert closedness_residual(DiscreteMeasure.point_mass([0.3, 0.3], [0.0, 0.0]), sys, 3) == 0.0
    assert closedness_residual(DiscreteMeasure.point_mass([0.3, 0.3], [1.0, 0.0]), sys, 3) > 0.1
    # a closed discrete loop: x1 runs once around the torus at unit speed
    K = 50
    states = np.column_stack([np.arange(K) / K, np.full(K, 0.3)])
    mu = DiscreteMeasure(states, np.tile([1.0, 0.0], (K, 1)), np.full(K, 1 / K))
    assert closedness_residual(mu, sys, 3) <= 1 / K


def test_smooth_family_member_matches_c1_integrand(rng):
    sys = grushin_periodic()
    x = rng.random((40, 2))
    u = rng.normal(size=(40, 2))
    v = np.einsum("nij,nj->ni", sys.eval(x), u)
    for fld in default_test_family(2)[:2]:
        one_sided, flagged = one_sided_derivative(fld, x, v)
        exact = np.sum(fld.gradient(x) * v, axis=1)
        assert not flagged.any()
        assert np.max(np.abs(one_sided - exact)) <= 1e-6


def test_strong_residual_point_mass_is_zero():
    res, report = strong_closedness_residual(DiscreteMeasure.point_mass([0.3, 0.3], [0.0, 0.0]), grushin_periodic())
    assert res == 0.0 and len(report) == 8


def test_one_sided_derivative_at_kink():
    fld = default_test_family(2)[2]  # min of bumps at 0 and 1/2: concave kink between them
    x = np.array([[0.25, 0.25]])
    right, _ = one_sided_derivative(fld, x, np.array([[1.0, 0.0]]))
    left, _ = one_sided_derivative(fld, x, np.array([[-1.0, 0.0]]))
    assert right[0] < 0 and left[0] < 0  # both one-sided slopes point down at a concave kink


def test_occupation_measure_concentrates():
    grid, sys, spec, ctrl = setup(16, G="sin2", n_u=21)
    mu = occupation_measure([0.3, 0.6], 20.0, 0.04, spec, sys, ctrl, grid)
    assert np.isclose(mu.weights.sum(), 1.0, atol=1e-12) and np.all(mu.weights == mu.weights[0])
    near = (np.abs(torus_difference(np.zeros(2), mu.states)).max(axis=1) <= 2 * grid.h) & \
           (np.linalg.norm(mu.controls, axis=1) <= 2 * ctrl.spacing)
    assert mu.weights[near].sum() >= 0.8
    # telescoping bound: residual <= 2 sup|phi| / T + C (step + h), phi normalised so sup|phi| <= 1/(2 pi)
    assert closedness_residual(mu, sys, 3) <= 2 / (2 * np.pi * 20.0) + (0.04 + grid.h)


def test_lp_examples():
    grid, sys, spec, ctrl, lp = _lp("zero")
    assert lp.value == 0.0 and np.all(lp.measure.controls == 0.0)
    grid, sys, spec, ctrl, lp = _lp("sin2")
    assert lp.value == pytest.approx(0.0, abs=1e-12)
    ms = mather_set(lp.measure)
    assert np.allclose(ms.projected, [[0.0, 0.0]])
    assert abs(lp.duality_gap) <= lp.tol and lp.residual <= 1e-9
    assert lp.measure.sigma_moment <= moment_cap(spec)


def test_lp_nontrivial_and_shift():
    grid, sys, spec, ctrl, lp = _lp("sin2", V=[0.5, 0.2])
    _, _, _, _, lp_shift = _lp("sin2", V=[0.5, 0.2], shift=0.3)
    assert lp_shift.value == pytest.approx(lp.value + 0.3, abs=1e-9)
    assert abs(lp.duality_gap) <= 1e-8 and lp.residual <= 1e-8 and lp.dual_infeasibility <= 1e-9
    # the Grushin bound min(|V|^2/2 + G, V1^2/2 + G on x1 = 0) = 0.125
    assert lp.value <= 0.125 + 0.05


def test_lp_more_modes_cannot_decrease_value():
    values = [_lp("sin2", V=[0.5, 0.2], K=K)[-1].value for K in (1, 2, 3)]
    assert values[0] <= values[1] + 1e-9 <= values[2] + 2e-9


def test_weak_duality_bound_against_occupation_measure():
    for V in (None, [0.5, 0.2]):
        grid, sys, spec, ctrl, lp = _lp("sin2", V=V)
        mu = occupation_measure([0.3, 0.6], 10.0, 0.04, spec, sys, ctrl, grid)
        wb = weak_duality_bound(lp, mu, spec, sys)
        assert lp.value <= wb["bound"] + 1e-9


def test_mather_set_auto_lowers():
    mu = DiscreteMeasure(np.zeros((2, 2)), np.zeros((2, 2)), np.array([0.5, 0.5]))
    with pytest.warns(UserWarning):
        ms = mather_set(mu, 0.9)
    assert ms.w_min == 0.5 and len(ms.projected) == 1


def test_inclusion_examples():
    grid = TorusGrid(2, 32)
    A = np.array([0, 1, 33])
    M = grid.nodes()[A]
    rep = inclusion_check(M, A, grid)
    assert rep.ok and rep.max_dist == 0
    rep = inclusion_check(grid.nodes()[[0]], [0], grid, shift_cells=[5, 0])
    assert not rep.ok and rep.max_dist == 5


def test_graph_check_examples():
    grid, sys, spec, ctrl = setup(16)
    chi = ScalarField.constant(grid, 0.0)
    assert graph_check(DiscreteMeasure.point_mass([0.2, 0.2], [0.0, 0.0]), chi, spec, sys) == 0.0
    wrong = DiscreteMeasure.point_mass([0.2, 0.2], [0.7, 0.0])
    assert graph_check(wrong, chi, spec, sys) >= 0.7 - 1e-12


def test_graph_residual_two_bump_decreases():
    res = []
    for n in (16, 32):
        grid, sys, spec, ctrl = setup(n, G="two-bump", n_u=21)
        chi = ergodic_iteration(0.02, 1e-4, 40000, spec, sys, ctrl, grid).chi
        lp = solve_mather_lp(TorusGrid(2, n // 2), ControlGrid(2, ctrl.radius, 5), 3, spec, sys)
        r = graph_check(lp.measure, chi, spec, sys)
        assert r <= 2 * (grid.h + 0.02)
        res.append(r)
        strong, _ = strong_closedness_residual(lp.measure, sys)
        assert strong <= 3 * 1e-6
    assert res[1] <= res[0]


@settings(max_examples=20)
@given(st.integers(1, 20), st.integers(0, 1000))
def test_measure_csv_roundtrip(k, seed):
    import tempfile

    rng = np.random.default_rng(seed)
    w = rng.random(k)
    mu = DiscreteMeasure(rng.random((k, 2)), rng.normal(size=(k, 2)), w / w.sum())
    with tempfile.TemporaryDirectory() as tmp:
        write_measure(f"{tmp}/m.csv", mu, ["header"])
        back = read_measure(f"{tmp}/m.csv")
    assert np.array_equal(back.states, mu.states) and np.array_equal(back.weights, mu.weights)


def test_closedness_vector_needs_modes():
    with pytest.raises(ValueError):
        closedness_vector(DiscreteMeasure.point_mass([0.0, 0.0], [0.0, 0.0]), grushin_periodic(), 0)
