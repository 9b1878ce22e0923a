"""End-to-end runs behind the command-line verbs.

Each ``run_*`` function works on a built :class:`~weakkam.config.Problem`
and returns plain results; the ``write_*`` functions turn them into files.
Check outcomes are collected in ``checks`` dictionaries of the form
``{name: {"value": ..., "threshold": ..., "ok": bool}}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .aubry import (
    BarrierMatrix,
    aubry_set,
    barrier_fixed_point_check,
    horizontal_gradient,
    peierls_barrier,
    stratified_sources,
)
from .config import Problem, RunConfig, build_problem
from .critical import (
    CriticalCertificate,
    SubsolutionResult,
    assemble_certificate,
    c_longtime,
    c_lower_subsolution,
    c_upper_measure,
)
from .lagrangian import moment_cap
from .lax_oleinik import ErgodicResult, SemiLagrangian, ergodic_iteration
from .measures import (
    MatherLP,
    MatherSet,
    closedness_residual,
    graph_check,
    inclusion_check,
    mather_set,
    solve_mather_lp,
    strong_closedness_residual,
)
from .outputs import OutputWriter
from .sr_structure import ScalarField, TorusGrid, torus_difference

logger = logging.getLogger(__name__)


def _check(value, threshold, ok) -> dict:
    return {"value": float(value), "threshold": float(threshold), "ok": bool(ok)}


def failed(checks: dict) -> list[str]:
    return [k for k, v in checks.items() if not v["ok"]]


# ---------------------------------------------------------------------------
# critical constant


@dataclass
class CriticalRun:
    certificate: CriticalCertificate
    ergodic: ErgodicResult
    longtime_value: ScalarField
    subsolution: SubsolutionResult
    lp: MatherLP


def run_ergodic(p: Problem, grid: TorusGrid | None = None) -> ErgodicResult:
    """Relative value iteration; on fine grids it starts from the solution
    on the grid with half the nodes (same controls and step)."""
    cc = p.cfg.critical
    grid = p.grid if grid is None else grid
    chi0 = None
    if cc.warm_start and grid.n >= 64 and grid.n % 2 == 0:
        coarse = run_ergodic(p, TorusGrid(grid.d, grid.n // 2))
        chi0 = coarse.chi.resample(grid)
    return ergodic_iteration(p.step, cc.tol, cc.max_iters, p.spec, p.sys, p.ctrl, grid, chi0=chi0,
                             cfl_cells=p.cfg.controls.cfl_cells)


def run_critical(p: Problem, strict: bool = True) -> CriticalRun:
    cfg = p.cfg
    c_long, V = c_longtime(cfg.time.T_max, p.step, p.spec, p.sys, p.ctrl, p.grid)
    erg = run_ergodic(p)
    sub = c_lower_subsolution(cfg.critical.K_modes, p.spec, p.sys, p.grid, iters=cfg.critical.iters,
                              restarts=cfg.critical.restarts, seed=cfg.seed)
    lp = solve_mather_lp(p.lp_grid, p.lp_controls, cfg.lp.K_modes, p.spec, p.sys, cfg.lp.tol)
    resolutions = {"n": p.grid.n, "n_u": cfg.controls.n_u, "n_controls": len(p.ctrl), "radius": p.ctrl.radius,
                   "delta": p.step, "K_modes": cfg.critical.K_modes, "T_max": cfg.time.T_max,
                   "n_lp": p.lp_grid.n, "n_u_lp": cfg.lp.n_u_lp, "K_modes_lp": cfg.lp.K_modes}
    details = {
        "ergodic_iterations": erg.iterations,
        "ergodic_last_update": erg.last_update,
        "longtime_minus_ergodic": c_long - erg.c,
        "subsolution_sampling_gap": sub.sampling_gap,
        "subsolution_per_K": sub.per_K,
        "lp_residual": lp.residual,
        "lp_duality_gap": lp.duality_gap,
        "lp_atoms": len(lp.measure),
        "tolerances": {"ergodic": cfg.critical.tol, "lp": cfg.lp.tol},
    }
    cert = assemble_certificate(c_long, erg.c, sub.c_lb, c_upper_measure(lp), resolutions,
                                cfg.critical.slack, details, strict=strict)
    return CriticalRun(cert, erg, V, sub, lp)


def build_certificate(cfg: RunConfig) -> CriticalCertificate:
    """All four estimators on the configured grids; raises SandwichError
    when the sandwich fails beyond ``critical.slack``."""
    return run_critical(build_problem(cfg)).certificate


def field_columns(fld: ScalarField) -> np.ndarray:
    return np.column_stack([fld.grid.nodes(), fld.flat])


def write_critical(out: OutputWriter, run: CriticalRun, p: Problem) -> None:
    from .lax_oleinik import write_field

    out.json("certificate.json", run.certificate.to_dict())
    rows = [("ergodic", it, c, upd) for it, c, upd in run.ergodic.trace]
    rows += [("subsolution", f"K{K}r{r}", -best, beta) for K, r, beta, best in run.subsolution.history]
    out.csv("critical_trace.csv", ["estimator", "iteration", "c_estimate", "update_or_beta"], rows)
    write_field(out.path("chi.field"), run.ergodic.chi, out.header + [f"c {run.ergodic.c!r}"])
    out.register("chi.field")
    out.columns("chi.dat", [f"x{i + 1}" for i in range(p.grid.d)] + ["chi"], field_columns(run.ergodic.chi))
    write_lp(out, run.lp)


def write_lp(out: OutputWriter, lp: MatherLP) -> None:
    out.json("lp_certificate.json", {
        "value": lp.value, "dual_value": lp.dual_value, "duality_gap": lp.duality_gap,
        "closedness_residual": lp.residual, "complementary_slackness": lp.slackness,
        "dual_infeasibility": lp.dual_infeasibility, "iterations": lp.iterations, "tol": lp.tol,
        "modes": lp.modes, "duals": lp.duals, "n_lp": lp.grid.n, "controls": len(lp.ctrl), **lp.meta,
    })


# ---------------------------------------------------------------------------
# Aubry set


@dataclass
class AubryRun:
    barrier: BarrierMatrix
    nodes: np.ndarray
    eps: float
    refined: np.ndarray  # indices into barrier.sources
    row: ScalarField  # refined barrier row of the first Aubry node
    gradient_gap: np.ndarray
    checks: dict = field(default_factory=dict)


def run_aubry(p: Problem, c: float) -> AubryRun:
    cfg = p.cfg
    bc = cfg.barrier
    op = SemiLagrangian(p.grid, p.sys, p.spec, p.ctrl, p.step, "backward", cfg.controls.cfl_cells)
    cap = 1024 if bc.sources == "all" else int(bc.sources)
    sources = stratified_sources(p.grid, cap)
    bm = peierls_barrier(c, op, sources, bc.base_steps, bc.T_min, bc.T_max, bc.slope, bc.stab_tol)
    eps_cfg = None if cfg.thresholds.aubry_eps == "auto" else float(cfg.thresholds.aubry_eps)
    nodes, eps = aubry_set(bm, eps_cfg)

    rng = np.random.default_rng(cfg.seed)
    checks = {}
    # triangle inequality through source nodes, on the min-plus matrix
    S = len(bm.sources)
    trip = rng.integers(0, S, size=(cfg.checks.n_samples, 3))
    col = bm.sources
    lhs = bm.values[trip[:, 0], col[trip[:, 2]]]
    rhs = bm.values[trip[:, 0], col[trip[:, 1]]] + bm.values[trip[:, 1], col[trip[:, 2]]]
    worst = float(np.max(lhs - rhs))
    checks["triangle_inequality"] = _check(worst, bm.eps_num + 1e-12, worst <= bm.eps_num + 1e-12)
    dmin = float(bm.diagonal().min())
    checks["diagonal_lower_bound"] = _check(dmin, -bm.eps_diag - 1e-12, dmin >= -bm.eps_diag - 1e-12)

    pos = {int(s): i for i, s in enumerate(bm.sources)}
    in_A = np.array([pos[int(a)] for a in nodes])
    if bc.refine == "none":
        refined = in_A[:1]
        which = np.zeros(0, dtype=np.int64)
    else:
        pool = np.arange(S) if bc.refine == "all" else in_A
        k = min(len(pool), bc.max_refine)
        which = pool[np.unique(np.linspace(0, len(pool) - 1, k).round().astype(np.int64))]
        refined = which
    if len(which):
        bm.refine_rows(op, which, slope=bc.slope)
    first = int(in_A[0])
    row = ScalarField(p.grid, bm.values[first], {"provenance": f"barrier row of node {bm.sources[first]}",
                                                 "time_horizon": None, "shift": 0.0})
    t_check = cfg.thresholds.t_check
    fp = barrier_fixed_point_check(row, c, t_check, op)
    checks["barrier_fixed_point"] = _check(fp, cfg.thresholds.fixed_point_tol, fp <= cfg.thresholds.fixed_point_tol)
    wrong = barrier_fixed_point_check(row, c + 0.2, t_check, op)
    checks["barrier_fixed_point_wrong_c"] = _check(wrong, 0.1, wrong >= 0.1)

    X = p.grid.nodes()
    gap = np.array([horizontal_gradient(row, p.sys, x, p.grid.h)[1] for x in X])
    return AubryRun(bm, nodes, eps, np.asarray(refined), row, gap, checks)


def write_aubry(out: OutputWriter, run: AubryRun, p: Problem) -> None:
    bm = run.barrier
    X = p.grid.nodes()
    d = p.grid.d
    xs = [f"x{i + 1}" for i in range(d)]
    rows = []
    for i in run.refined:
        s = int(bm.sources[i])
        rows += [(s, j, float(bm.values[i, j])) for j in range(p.grid.size)]
    out.csv("barrier.csv", ["source_index", "target_index", "value"], rows,
            [f"c {bm.c_used!r}", f"t_window {bm.t_window[0]!r} {bm.t_window[1]!r}",
             f"rows for {len(run.refined)} source nodes (direct evaluation)"])
    diag = bm.diagonal()
    out.csv("barrier_diagonal.csv", ["source_index", "value", "octave_change"],
            [(int(s), float(v), float(bm.octave_change[i, s])) for i, (s, v) in enumerate(zip(bm.sources, diag))])
    out.csv("aubry_nodes.csv", ["node_index"] + xs, [(int(a), *X[a]) for a in run.nodes],
            [f"eps {run.eps!r}", f"eps_diag {bm.eps_diag!r}", f"eps_num {bm.eps_num!r}"])
    out.columns("barrier_diagonal.dat", xs + ["h_xx"], np.column_stack([X[bm.sources], diag]))
    out.columns("barrier_row.dat", xs + ["h"], field_columns(run.row),
                [f"source node {int(bm.sources[run.refined[0]]) if len(run.refined) else -1}"])
    out.columns("gradient_gap.dat", xs + ["one_sided_gap"], np.column_stack([X, run.gradient_gap]))
    out.json("aubry_checks.json", {"c": bm.c_used, "eps": run.eps, "eps_num": bm.eps_num,
                                   "eps_diag": bm.eps_diag,
                                   "aubry_size": len(run.nodes), "sources": len(bm.sources),
                                   "unstable_pairs": bm.unstable_pairs, "t_window": bm.t_window,
                                   "checks": run.checks})


# ---------------------------------------------------------------------------
# Mather measures


@dataclass
class MatherRun:
    lp: MatherLP
    mather: MatherSet
    checks: dict
    strong: dict


def run_mather(p: Problem, chi: ScalarField, aubry_nodes: np.ndarray) -> MatherRun:
    cfg = p.cfg
    lp = solve_mather_lp(p.lp_grid, p.lp_controls, cfg.lp.K_modes, p.spec, p.sys, cfg.lp.tol)
    ms = mather_set(lp.measure, cfg.thresholds.w_min)
    inc = inclusion_check(ms.projected, aubry_nodes, p.grid, cfg.checks.inject_shift)
    graph = graph_check(lp.measure, chi, p.spec, p.sys, ms.w_min)
    strong, strong_report = strong_closedness_residual(lp.measure, p.sys)
    res_tol = max(1e3 * cfg.lp.tol, 1e-8)
    checks = {
        "inclusion": _check(inc.max_dist, 1.0, inc.ok),
        "graph": _check(graph, cfg.thresholds.graph_tol, graph <= cfg.thresholds.graph_tol),
        "closedness": _check(lp.residual, res_tol, lp.residual <= res_tol),
        "duality_gap": _check(abs(lp.duality_gap), res_tol, abs(lp.duality_gap) <= res_tol),
        "strong_closedness": _check(strong, 3 * res_tol + 1e-6, strong <= 3 * res_tol + 1e-6),
        "sigma_moment": _check(lp.measure.sigma_moment, moment_cap(p.spec),
                               lp.measure.sigma_moment <= moment_cap(p.spec) + 1e-9),
    }
    return MatherRun(lp, ms, checks, strong_report)


def write_mather(out: OutputWriter, run: MatherRun, p: Problem) -> None:
    from .measures import write_measure

    write_measure(out.path("mather_measure.csv"), run.lp.measure, out.header + [f"value {run.lp.value!r}"])
    out.register("mather_measure.csv")
    write_lp(out, run.lp)
    X = run.mather.projected
    out.columns("mather_support.dat", [f"x{i + 1}" for i in range(p.grid.d)], X)
    out.json("mather_checks.json", {"value": run.lp.value, "w_min": run.mather.w_min,
                                    "support_atoms": len(run.mather.weights), "projected": X,
                                    "checks": run.checks, "strong_closedness": run.strong})


# ---------------------------------------------------------------------------
# Grushin example


def gmane_bound(p: Problem) -> dict:
    """Both grid minima of the Grushin upper bound for a Mane Lagrangian:
    min_y (|V|^2/2 + G) and min over the line x1 = 0 of (V1^2/2 + G)."""
    X = p.grid.nodes()
    Vx = np.asarray(p.spec.V(X), dtype=float)
    Gx = np.asarray(p.spec.G(X), dtype=float) + p.spec.shift
    full = 0.5 * np.sum(Vx**2, axis=1) + Gx
    line = np.isclose(X[:, 0], 0.0)
    edge = 0.5 * Vx[line, 0] ** 2 + Gx[line]
    return {"global": float(full.min()), "line": float(edge.min()), "rhs": float(min(full.min(), edge.min())),
            "min_G": float(Gx.min()), "argmin_G": X[int(np.argmin(Gx))].tolist(),
            "V_at_argmin": Vx[int(np.argmin(Gx))].tolist()}


@dataclass
class GrushinRun:
    c_est: float
    bound: dict
    lp: MatherLP
    checks: dict
    equality_case: bool
    support_mass: float


def run_grushin_demo(p: Problem) -> GrushinRun:
    if p.spec.kind != "mane":
        raise ValueError("the Grushin demo needs a Mane Lagrangian")
    tol = p.cfg.critical.slack
    erg = run_ergodic(p)
    bound = gmane_bound(p)
    checks = {"upper_bound": _check(erg.c - bound["rhs"], tol, erg.c <= bound["rhs"] + tol)}
    lp = solve_mather_lp(p.lp_grid, p.lp_controls, p.cfg.lp.K_modes, p.spec, p.sys, p.cfg.lp.tol)
    xstar = np.array(bound["argmin_G"])
    equality = bool(np.allclose(bound["V_at_argmin"], 0.0))
    mu = lp.measure
    near = (np.abs(torus_difference(xstar, mu.states)).max(axis=1) <= 2 * p.grid.h + 1e-12) & \
           (np.linalg.norm(mu.controls, axis=1) <= 1e-12)
    mass = float(mu.weights[near].sum())
    if equality:
        dev = abs(erg.c - bound["min_G"])
        checks["equality_c"] = _check(dev, tol, dev <= tol)
        checks["support_at_minimum"] = _check(mass, 0.9, mass >= 0.9)
    return GrushinRun(erg.c, bound, lp, checks, equality, mass)


def write_grushin(out: OutputWriter, run: GrushinRun, p: Problem) -> None:
    b = run.bound
    lines = [
        f"frame {p.sys.name}",
        f"lagrangian V={p.spec.names.get('V')} G={p.spec.names.get('G')} shift={p.spec.shift!r}",
        f"grid n={p.grid.n} delta={p.step!r} controls={len(p.ctrl)} radius={p.ctrl.radius!r}",
        f"c_est {run.c_est!r}",
        f"bound min_y(|V|^2/2+G) {b['global']!r}",
        f"bound min_z(V1(0,z)^2/2+G(0,z)) {b['line']!r}",
        f"bound rhs {b['rhs']!r}",
        f"equality_case {run.equality_case}",
        f"min_G {b['min_G']!r} at {b['argmin_G']}",
        f"lp_value {run.lp.value!r}",
        f"lp_mass_near_minimum_u0 {run.support_mass!r}",
    ]
    for k, v in run.checks.items():
        lines.append(f"check {k} value={v['value']!r} threshold={v['threshold']!r} {'PASS' if v['ok'] else 'FAIL'}")
    out.text("grushin_report.txt", lines)
    out.json("grushin_demo.json", {"c_est": run.c_est, "bound": b, "equality_case": run.equality_case,
                                   "lp_value": run.lp.value, "support_mass": run.support_mass,
                                   "checks": run.checks})
