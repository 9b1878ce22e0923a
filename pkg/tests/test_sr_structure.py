import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakkam.sr_structure import (
    ControlGrid,
    ScalarField,
    TorusGrid,
    UnreachableError,
    frame_by_name,
    frame_rank,
    grushin_chart,
    grushin_periodic,
    interpolate,
    riemannian_identity,
    sr_distance,
    tabulated_frame,
    torus_difference,
)

coords = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)


def test_grid_basics():
    g = TorusGrid(2, 8)
    assert g.h == 0.125 and g.size == 64 and g.shape == (8, 8)
    X = g.nodes()
    assert np.array_equal(X[g.flat_index(g.multi_index(np.arange(64)))], X)
    assert g.nearest_node([0.99, 0.01]) == 0
    with pytest.raises(ValueError):
        TorusGrid(2, 1)


def test_torus_difference_wraps():
    assert np.allclose(torus_difference(np.array([0.9, 0.1]), np.array([0.1, 0.9])), [0.2, -0.2])


def test_control_grid_symmetric_with_zero():
    c = ControlGrid(2, 1.5, 11)
    assert np.all(np.linalg.norm(c.points, axis=1) <= 1.5 + 1e-12)
    assert np.allclose(c.points[c.zero_index], 0)
    pts = {tuple(p) for p in np.round(c.points, 12)}
    assert all(tuple(-np.array(p) + 0.0) in pts for p in pts)


def test_frame_examples():
    assert np.allclose(grushin_chart().eval(np.array([0.25, 0.8])), np.diag([1.0, 0.25]))
    assert np.allclose(grushin_periodic().eval(np.array([0.5, 0.3])), np.diag([1.0, 0.0]), atol=1e-15)
    assert np.allclose(riemannian_identity(2).eval(np.array([0.1, 0.7])), np.eye(2))


@given(coords, coords)
def test_frames_periodic(a, b):
    x = np.array([a, b])
    for name in ("grushin-chart", "grushin-periodic", "riemannian-identity"):
        s = frame_by_name(name)
        assert np.allclose(s.eval(x), s.eval(x + np.array([1.0, -2.0])), atol=1e-9)


@given(st.floats(min_value=0.0, max_value=0.999, allow_nan=False))
def test_grushin_chart_rank(x1):
    r = np.mod(x1 + 0.5, 1.0) - 0.5
    expected = 1 if abs(r) <= 1e-12 else 2
    assert frame_rank(grushin_chart(), np.array([x1, 0.3])) == expected


def test_interpolate_examples():
    g = TorusGrid(2, 64)
    assert interpolate(ScalarField.constant(g, 3.0), [0.123, 0.77]) == 3.0
    f = ScalarField.from_function(g, lambda X: np.cos(2 * np.pi * X[:, 0]))
    x = g.nodes()[517]
    assert interpolate(f, x) == np.cos(2 * np.pi * x[0])
    g1 = TorusGrid(1, 2)
    assert interpolate(ScalarField(g1, [0.0, 1.0]), [0.25]) == 0.5


@settings(max_examples=50)
@given(coords, coords)
def test_interpolate_within_corner_bounds(a, b):
    g = TorusGrid(2, 8)
    vals = np.random.default_rng(0).normal(size=g.shape)
    f = ScalarField(g, vals)
    x = np.mod(np.array([a, b]), 1.0)
    i0 = np.floor(x / g.h).astype(int)
    corners = [vals[(i0[0] + p) % 8, (i0[1] + q) % 8] for p in (0, 1) for q in (0, 1)]
    v = interpolate(f, [a, b])
    assert min(corners) - 1e-12 <= v <= max(corners) + 1e-12


def test_resample_exact_for_multilinear():
    coarse = TorusGrid(2, 8)
    f = ScalarField(coarse, np.random.default_rng(3).normal(size=coarse.shape))
    fine = f.resample(TorusGrid(2, 16))
    assert np.allclose(fine.values[::2, ::2], f.values)


def test_tabulated_frame_roundtrip(tmp_path):
    g = TorusGrid(2, 8)
    F = grushin_periodic().eval(g.nodes())
    path = tmp_path / "frame.txt"
    np.savetxt(path, F.reshape(g.size, -1))
    tab = tabulated_frame(path, 2, 2)
    assert np.allclose(tab.eval(g.nodes()), F)
    assert not tab.full_rank_everywhere


def test_sr_distance_flat():
    g = TorusGrid(2, 32)
    D = sr_distance(riemannian_identity(2), g, [0.0, 0.0], tol=1e-8)
    assert D.flat[0] == 0.0 and np.all(D.flat >= 0)
    assert abs(interpolate(D, [0.25, 0.0]) - 0.25) <= 2 * g.h


def test_sr_distance_grushin_against_fine_grid():
    sys = grushin_chart()
    coarse = sr_distance(sys, TorusGrid(2, 16), [0.0, 0.0], tol=1e-7)
    fine = sr_distance(sys, TorusGrid(2, 64), [0.0, 0.0], tol=1e-7)
    y = [0.0, 0.125]
    assert abs(interpolate(coarse, y) - interpolate(fine, y)) <= 2 * (1 / 16)


def test_sr_distance_symmetry_and_triangle():
    g = TorusGrid(2, 16)
    sys = grushin_periodic()
    pts = [0, 37, 130, 200]
    D = {i: sr_distance(sys, g, g.nodes()[i], tol=1e-7) for i in pts}
    lip = 1.0
    for i in pts:
        for j in pts:
            assert abs(D[i].flat[j] - D[j].flat[i]) <= 2 * g.h * lip + 1e-9
            for k in pts:
                assert D[i].flat[k] <= D[i].flat[j] + D[j].flat[k] + 3 * g.h


def test_sr_distance_reports_unreachable():
    from weakkam.sr_structure import FieldSystem

    frozen = FieldSystem("frozen", 2, 1, lambda x: np.tile([[1.0], [0.0]], (len(x), 1, 1)), "", False)
    with pytest.raises(UnreachableError) as exc:
        sr_distance(frozen, TorusGrid(2, 8), [0.0, 0.0])
    assert len(exc.value.nodes) == 56
