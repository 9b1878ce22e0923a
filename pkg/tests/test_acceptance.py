"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) and
then asserts.  The shipped configurations under configs/ are the examples.
"""

import filecmp
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from weakkam.aubry import barrier_fixed_point_check
from weakkam.config import RunConfig, build_problem
from weakkam.lax_oleinik import SemiLagrangian, backward_step, minplus_double
from weakkam.measures import closedness_residual, graph_check, occupation_measure, solve_mather_lp
from weakkam.pipeline import gmane_bound, run_aubry, run_critical, run_ergodic, run_mather
from weakkam.sr_structure import ScalarField, TorusGrid, grushin_periodic, interpolate, torus_difference

from conftest import mane, record, setup

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def load(name, **grid):
    cfg = RunConfig.load(CONFIGS / f"{name}.json")
    for k, v in grid.items():
        section, _, field = k.partition("__")
        setattr(getattr(cfg, section), field, v)
    cfg.validate()
    return cfg


def estimators(cert):
    return np.array([cert.c_longtime, cert.c_ergodic, cert.c_lower, cert.c_upper])


@pytest.fixture(scope="module")
def grushin_sin2_run():
    """Criterion 3 pipeline (critical, Aubry, Mather) at n = 32, timed."""
    t0 = time.perf_counter()
    p = build_problem(load("grushin_sin2"))
    crit = run_critical(p)
    aub = run_aubry(p, crit.certificate.c_ergodic)
    mat = run_mather(p, crit.ergodic.chi, aub.nodes)
    return p, crit, aub, mat, time.perf_counter() - t0


@pytest.fixture(scope="module")
def two_bump_run():
    t0 = time.perf_counter()
    p = build_problem(load("two_bump"))
    crit = run_critical(p)
    aub = run_aubry(p, crit.certificate.c_ergodic)
    return p, crit, aub, time.perf_counter() - t0


def test_criterion_01_zero_lagrangian():
    t0 = time.perf_counter()
    p = build_problem(load("zero"))
    assert p.grid.n == 32 and p.step == 0.02 and p.sys.name == "grushin-periodic"
    crit = run_critical(p)
    aub = run_aubry(p, crit.certificate.c_ergodic)
    elapsed = time.perf_counter() - t0
    est = estimators(crit.certificate)
    ok = bool(np.all(np.abs(est) <= 1e-3) and len(aub.nodes) == p.grid.size
              and crit.lp.value == 0.0 and elapsed <= 30.0)
    record("criterion 1", ok, f"estimators={est.tolist()} aubry={len(aub.nodes)}/{p.grid.size} "
           f"lp={crit.lp.value!r} time={elapsed:.1f}s")
    assert ok


@pytest.mark.parametrize("g0", [0.3, 0.7])
def test_criterion_02_constant_cost(g0):
    t0 = time.perf_counter()
    p = build_problem(load(f"const_0{int(g0 * 10)}"))
    crit = run_critical(p)
    elapsed = time.perf_counter() - t0
    tol = p.cfg.critical.tol
    est = estimators(crit.certificate)
    ok = bool(np.all(np.abs(est - g0) <= tol) and elapsed <= 60.0)
    record(f"criterion 2 (g0={g0})", ok, f"estimators={est.tolist()} tol={tol} time={elapsed:.1f}s")
    assert ok


def test_criterion_03_grushin_equality(grushin_sin2_run):
    p, crit, aub, mat, elapsed = grushin_sin2_run
    c_est = crit.certificate.c_ergodic
    mu = crit.lp.measure
    cells = np.abs(torus_difference(np.zeros(2), mu.states)).max(axis=1) / p.grid.h
    mass = float(mu.weights[cells <= 2 + 1e-9].sum())
    inc = mat.checks["inclusion"]
    ok = bool(-0.05 <= c_est <= 0.05 and mass >= 0.9 and inc["ok"] and elapsed <= 300.0)
    record("criterion 3", ok, f"c_est={c_est!r} mass_within_2_cells={mass!r} "
           f"inclusion_dist={inc['value']!r} time={elapsed:.1f}s")
    assert ok


def test_criterion_04_grushin_bound():
    t0 = time.perf_counter()
    p = build_problem(load("grushin_drift"))
    c_est = run_ergodic(p).c
    rhs = gmane_bound(p)["rhs"]
    elapsed = time.perf_counter() - t0
    ok = bool(abs(rhs - 0.045) <= 1e-12 and c_est <= 0.045 + 0.02 and elapsed <= 300.0)
    record("criterion 4", ok, f"c_est={c_est!r} rhs={rhs!r} time={elapsed:.1f}s")
    assert ok


def test_criterion_05_sandwich(two_bump_run):
    p, crit, _, _ = two_bump_run
    c32 = crit.certificate
    assert p.grid.n == 32 and p.cfg.critical.K_modes == 3
    fine = build_problem(load("two_bump_n64"))
    assert fine.grid.n == 64 and fine.cfg.critical.K_modes == 4
    c64 = run_critical(fine).certificate
    sandwich = c32.c_lower <= c32.c_ergodic <= c32.c_upper and c64.c_lower <= c64.c_ergodic <= c64.c_upper
    # "shrinks" is read as non-increasing: both gaps can already be zero
    ok = bool(sandwich and c32.gap <= 0.1 and c64.gap <= c32.gap)
    record("criterion 5", ok, f"n32: lower={c32.c_lower!r} ergodic={c32.c_ergodic!r} upper={c32.c_upper!r} "
           f"gap={c32.gap!r}; n64: gap={c64.gap!r}")
    assert ok


def test_criterion_06_barrier(two_bump_run):
    p, crit, aub, _ = two_bump_run
    bm = aub.barrier
    rng = np.random.default_rng(p.cfg.seed)
    S = bm.sources
    trip = rng.integers(0, len(S), size=(200, 3))
    excess = bm.values[trip[:, 0], S[trip[:, 2]]] - bm.values[trip[:, 0], S[trip[:, 1]]] \
        - bm.values[trip[:, 1], S[trip[:, 2]]]
    tri = float(excess.max())
    dmin = float(bm.diagonal().min())
    op = SemiLagrangian(p.grid, p.sys, p.spec, p.ctrl, p.step)
    c = crit.certificate.c_ergodic
    fp = barrier_fixed_point_check(aub.row, c, 1.0, op)
    wrong = barrier_fixed_point_check(aub.row, c + 0.2, 1.0, op)
    # the triangle check runs on the matrix before row refinement inside run_aubry;
    # here it is repeated on the refined matrix, whose rows only decreased
    ok = bool(tri <= bm.eps_num and dmin >= -bm.eps_num and fp <= 0.05 and wrong >= 0.1
              and aub.checks["triangle_inequality"]["ok"])
    record("criterion 6", ok, f"triangle_excess={tri!r} eps_num={bm.eps_num!r} diag_min={dmin!r} "
           f"fixed_point={fp!r} wrong_c={wrong!r}")
    assert ok


def test_criterion_07_closedness_decay():
    p = build_problem(load("two_bump"))
    x0 = [0.3, 0.6]
    res = {}
    for T in (10.0, 40.0):
        mu = occupation_measure(x0, T, p.step, p.spec, p.sys, p.ctrl, p.grid)
        res[T] = closedness_residual(mu, p.sys, p.cfg.lp.K_modes)
    ok = bool(res[40.0] <= 0.5 * res[10.0] + 0.02)
    record("criterion 7", ok, f"residual(T=10)={res[10.0]!r} residual(T=40)={res[40.0]!r}")
    assert ok


def test_criterion_08_graph(grushin_sin2_run):
    p, crit, aub, mat, _ = grushin_sin2_run
    r32 = graph_check(crit.lp.measure, crit.ergodic.chi, p.spec, p.sys, p.cfg.thresholds.w_min)
    fine = build_problem(load("grushin_sin2", grid__n=64))
    chi64 = run_ergodic(fine).chi
    lp64 = solve_mather_lp(fine.lp_grid, fine.lp_controls, fine.cfg.lp.K_modes, fine.spec, fine.sys, fine.cfg.lp.tol)
    r64 = graph_check(lp64.measure, chi64, fine.spec, fine.sys, fine.cfg.thresholds.w_min)
    ok = bool(r32 <= 0.1 and r64 <= 0.06)
    record("criterion 8", ok, f"graph_residual n32={r32!r} n64={r64!r}")
    assert ok


def test_criterion_09_oracles():
    rng = np.random.default_rng(9)
    grid = TorusGrid(2, 16)
    spec = mane(grid, "two-bump", V=[0.3, -0.2])
    sys = grushin_periodic()
    ax = np.linspace(-4.0, 4.0, 201)
    U = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    x = rng.random((1000, 2))
    q = rng.uniform(-1.5, 1.5, (1000, 2))
    p = rng.uniform(-2.0, 2.0, (1000, 2))
    Fp = np.einsum("nij,ni->nj", sys.eval(x), p)
    brute_L = np.array([np.max(U @ q[i] - spec.eval(x[i][None], U)) for i in range(1000)])
    brute_H = np.array([np.max(U @ Fp[i] - spec.eval(x[i][None], U)) for i in range(1000)])
    err_L = float(np.max(np.abs(spec.legendre(x, q) - brute_L)))
    err_H = float(np.max(np.abs(spec.hamiltonian(sys, x, p) - brute_H)))

    A = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], dtype=float)
    minplus_ok = bool(np.array_equal(minplus_double(A), np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)))

    g, s, sp, ctrl = setup(16, G="sin2", n_u=9, radius=1.5)
    phi = ScalarField.from_function(g, lambda X: np.linalg.norm(torus_difference(np.array([0.3, 0.6]), X), axis=1))
    out = backward_step(phi, 0.05, sp, s, ctrl)
    node = 141
    xn = g.nodes()[node]
    exhaustive = min(interpolate(phi, xn - 0.05 * s.eval(xn) @ u) + 0.05 * float(sp.eval(xn, u)) for u in ctrl.points)
    step_ok = out.flat[node] == exhaustive

    ok = bool(err_L <= 1e-3 and err_H <= 1e-3 and minplus_ok and step_ok)
    record("criterion 9", ok, f"legendre_err={err_L:.3g} hamiltonian_err={err_H:.3g} "
           f"minplus_exact={minplus_ok} backward_step_exact={step_ok}")
    assert ok


def _run_cli(verb, cfg, out, threads):
    env = dict(os.environ)
    for var in ("NUMBA_NUM_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env.pop(var, None)
    proc = subprocess.run([sys.executable, "-m", "weakkam.cli", verb, "--config", str(cfg), "--out", str(out),
                           "--threads", str(threads)], env=env, capture_output=True, text=True)
    return proc.returncode


def _numba_threads(threads):
    code = ("import sys; from weakkam.cli import _set_threads; _set_threads(int(sys.argv[1])); "
            "import weakkam.lax_oleinik, numba; print(numba.get_num_threads())")
    env = {k: v for k, v in os.environ.items() if k != "NUMBA_NUM_THREADS"}
    out = subprocess.run([sys.executable, "-c", code, str(threads)], env=env, capture_output=True, text=True)
    return int(out.stdout.strip())


def test_criterion_10_determinism(tmp_path):
    used = [_numba_threads(t) for t in (1, 8)]
    mismatches = [] if used == [1, 8] else [f"numba threads {used}"]
    runs = 0
    for cfg in sorted(CONFIGS.glob("*.json")):
        verbs = ["mather"] + (["grushin-demo"] if "grushin" in cfg.stem else [])
        for verb in verbs:
            dirs = [tmp_path / f"{cfg.stem}-{verb}-t{t}" for t in (1, 8)]
            codes = [_run_cli(verb, cfg, d, t) for d, t in zip(dirs, (1, 8))]
            runs += 2
            names = sorted(f.name for f in dirs[0].iterdir())
            if codes[0] != codes[1] or names != sorted(f.name for f in dirs[1].iterdir()) or not names:
                mismatches.append(f"{cfg.stem}/{verb}: exit {codes} files differ")
                continue
            _, diff, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
            mismatches += [f"{cfg.stem}/{verb}/{n}" for n in diff + errors]
    ok = not mismatches
    record("criterion 10", ok, f"numba threads {used}; {runs} runs over {len(list(CONFIGS.glob('*.json')))} configs; "
           f"mismatches={mismatches}")
    assert ok
