"""Discrete measures on state x control space: occupation measures of
optimal trajectories, closedness residuals, the Mather LP and the checks
that relate its support to the Aubry set and to the critical solution."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._kernels import displacement
from .aubry import horizontal_gradient
from .critical import fourier_gradient_basis, fourier_modes, fourier_values
from .lagrangian import LagrangianSpec
from .lax_oleinik import SemiLagrangian, forward_value, n_steps
from .simplex import LPError, revised_simplex
from .sr_structure import ControlGrid, FieldSystem, ScalarField, TorusGrid, torus_difference

logger = logging.getLogger(__name__)


@dataclass
class DiscreteMeasure:
    """Atoms (states[i], controls[i]) with weights[i]."""

    states: np.ndarray
    controls: np.ndarray
    weights: np.ndarray
    sigma: float = 2.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if not (len(self.states) == len(self.controls) == len(self.weights)):
            raise ValueError("states, controls and weights must have equal length")
        if np.any(self.weights < 0):
            raise ValueError("negative weight")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {math.fsum(self.weights)!r}, not 1")

    def __len__(self):
        return len(self.weights)

    @classmethod
    def point_mass(cls, x, u, sigma: float = 2.0) -> "DiscreteMeasure":
        return cls(np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None], np.ones(1), sigma)

    @property
    def sigma_moment(self) -> float:
        return float(self.weights @ np.sum(self.controls**2, axis=1) ** (self.sigma / 2))

    def action(self, spec: LagrangianSpec) -> float:
        return float(self.weights @ spec.eval(self.states, self.controls))

    def restrict(self, keep: np.ndarray) -> "DiscreteMeasure":
        """Atoms in ``keep`` (a mask or index array), renormalised."""
        w = self.weights[keep]
        return DiscreteMeasure(self.states[keep], self.controls[keep], w / math.fsum(w), self.sigma, dict(self.meta))


# ---------------------------------------------------------------------------
# occupation measures


def occupation_measure(x0, T: float, step: float, spec: LagrangianSpec, sys: FieldSystem, ctrl: ControlGrid,
                       grid: TorusGrid, chi: ScalarField | None = None) -> DiscreteMeasure:
    """Uniform measure on the discrete optimal pair (gamma_k, u_k), k < T/step.

    Without ``chi`` the controls minimise step L(x, u) + V^{T - (k+1) step}(x + step F u)
    at the current (off-grid) state, using the stored forward value history.
    With ``chi`` (a fixed point of the forward operator) the same rule is
    applied with chi in place of the remaining-horizon value.
    """
    K = n_steps(T, step)
    if K < 1:
        raise ValueError("T must be at least one step")
    op = SemiLagrangian(grid, sys, spec, ctrl, step, "forward")
    history = None
    if chi is None:
        _, history = forward_value(T, step, spec, sys, ctrl, grid, keep_history=True)
    x = np.mod(np.asarray(x0, dtype=float), 1.0)
    states = np.empty((K, grid.d))
    controls = np.empty((K, sys.m))
    for k in range(K):
        values = chi.flat if chi is not None else history[K - k - 1]
        j, _ = op.policy_at(values, x)
        u = ctrl.points[j]
        states[k], controls[k] = x, u
        x = np.mod(x + step * displacement(sys.eval(x)[None], u[None])[0], 1.0)
    w = np.full(K, 1.0 / K)
    mu = DiscreteMeasure(states, controls, w, spec.sigma,
                         {"x0": states[0].tolist(), "x_end": x.tolist(), "T": T, "step": step})
    return mu


# ---------------------------------------------------------------------------
# closedness


def closedness_vector(mu: DiscreteMeasure, sys: FieldSystem, K_modes: int) -> np.ndarray:
    """sum_i w_i <F(x_i)^T D phi_k(x_i), u_i> for every normalised real
    Fourier function phi_k with 0 < |k|_inf <= K_modes (cos, sin interleaved)."""
    if K_modes < 1:
        raise ValueError("K_modes must be at least 1")
    modes = fourier_modes(mu.states.shape[1], K_modes)
    B = fourier_gradient_basis(mu.states, modes, normalise=True)
    Fu = displacement(sys.eval(mu.states), mu.controls)
    return np.einsum("npd,nd,n->p", B, Fu, mu.weights)


def closedness_residual(mu: DiscreteMeasure, sys: FieldSystem, K_modes: int) -> float:
    return float(np.max(np.abs(closedness_vector(mu, sys, K_modes))))


def quadratic_cosine(x: np.ndarray, center) -> np.ndarray:
    """sum_i (1 - cos 2 pi (x_i - s_i)) / (2 pi^2), a smooth periodic bump
    that equals |x - s|^2 to leading order near s."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.asarray(center, dtype=float)
    return np.sum(1.0 - np.cos(2 * np.pi * (x - s)), axis=-1) / (2 * np.pi**2)


@dataclass(frozen=True)
class SemiconcaveField:
    """x -> min over centers s of quadratic_cosine(x, s)."""

    name: str
    centers: tuple

    def __call__(self, x) -> np.ndarray:
        vals = np.stack([quadratic_cosine(x, s) for s in self.centers])
        return vals.min(axis=0)

    @property
    def smooth(self) -> bool:
        return len(self.centers) == 1

    def gradient(self, x) -> np.ndarray:
        """Gradient of a single-center member (defined everywhere)."""
        if not self.smooth:
            raise ValueError("gradient only defined for single-center members")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.sin(2 * np.pi * (x - np.asarray(self.centers[0]))) / np.pi


def default_test_family(d: int) -> list[SemiconcaveField]:
    """Eight fixed fields; the first two are smooth, the rest have concave kinks."""

    def pt(*coords):
        return tuple(coords[i % len(coords)] for i in range(d))

    spec = [
        ("q[0]", [pt(0.0)]),
        ("q[1/4,1/2]", [pt(0.25, 0.5)]),
        ("min(q[0],q[1/2])", [pt(0.0), pt(0.5)]),
        ("min(q[0],q[1/2,0])", [pt(0.0), pt(0.5, 0.0)]),
        ("min(q[0],q[0,1/2])", [pt(0.0), pt(0.0, 0.5)]),
        ("min(q[1/4],q[3/4])", [pt(0.25), pt(0.75)]),
        ("min(q[1/4,3/4],q[3/4,1/4],q[1/2])", [pt(0.25, 0.75), pt(0.75, 0.25), pt(0.5)]),
        ("min4(q[0],q[1/2,0],q[0,1/2],q[1/2])", [pt(0.0), pt(0.5, 0.0), pt(0.0, 0.5), pt(0.5)]),
    ]
    return [SemiconcaveField(name, tuple(c)) for name, c in spec]


def one_sided_derivative(phi, x: np.ndarray, v: np.ndarray, delta: float = 1e-4, tol: float = 1e-6,
                         max_halvings: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """lim_{s -> 0+} [phi(x + s v) - phi(x)] / s, row by row.

    Uses the Richardson combination 2 D(s/2) - D(s) of one-sided quotients,
    with s measured along the unit direction; s is halved until two
    consecutive extrapolations agree within ``tol``.  Returns the values and
    a mask of rows that never stabilised.
    """
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    speed = np.linalg.norm(v, axis=1)
    e = np.where(speed[:, None] > 0, v / np.where(speed > 0, speed, 1.0)[:, None], 0.0)
    f0 = phi(x)

    def quotient(s):
        return (phi(x + s * e) - f0) / s

    def richardson(s):
        return 2.0 * quotient(s / 2) - quotient(s)

    s = delta
    prev = richardson(s)
    out = prev.copy()
    done = np.zeros(len(x), dtype=bool)
    for _ in range(max_halvings):
        s /= 2
        cur = richardson(s)
        ok = ~done & (np.abs(cur - prev) <= tol * (1.0 + np.abs(cur)))
        out[ok] = cur[ok]
        done |= ok
        if done.all():
            break
        prev = cur
    out[~done] = prev[~done]
    return speed * out, ~done & (speed > 0)


def strong_closedness_residual(mu: DiscreteMeasure, sys: FieldSystem, family=None,
                               delta: float = 1e-4, tol: float = 1e-6) -> tuple[float, dict]:
    """max over the family of |sum_i w_i d_F phi(x_i, u_i)| with the one-sided
    horizontal derivative d_F phi(x, u) = lim [phi(x + s F(x) u) - phi(x)] / s.

    Returns the residual and per-field details (value, flagged atom count).
    """
    family = default_test_family(mu.states.shape[1]) if family is None else family
    v = displacement(sys.eval(mu.states), mu.controls)
    worst = 0.0
    report = {}
    for fld in family:
        dphi, flagged = one_sided_derivative(fld, mu.states, v, delta, tol)
        val = float(mu.weights @ dphi)
        report[fld.name] = {"value": val, "flagged_atoms": int(flagged.sum())}
        if flagged.any():
            logger.warning("%s: %d atoms without a stable one-sided limit", fld.name, int(flagged.sum()))
        worst = max(worst, abs(val))
    return worst, report


# ---------------------------------------------------------------------------
# Mather LP


@dataclass
class MatherLP:
    measure: DiscreteMeasure
    value: float
    dual_value: float
    duals: np.ndarray  # one multiplier per normalised Fourier function
    modes: np.ndarray
    residual: float  # closedness residual of the primal, recomputed independently
    slackness: float
    dual_infeasibility: float
    iterations: int
    tol: float
    grid: TorusGrid
    ctrl: ControlGrid
    meta: dict = field(default_factory=dict)

    @property
    def duality_gap(self) -> float:
        return self.value - self.dual_value

    def dual_subsolution(self, x) -> np.ndarray:
        """psi = sum lambda_k phi_k built from the closedness multipliers."""
        return fourier_values(x, self.modes, self.duals, normalise=True)

    def dual_gradient(self, x) -> np.ndarray:
        B = fourier_gradient_basis(x, self.modes, normalise=True)
        return np.einsum("npd,p->nd", B, self.duals)


def closedness_matrix(X: np.ndarray, U: np.ndarray, sys: FieldSystem, modes: np.ndarray) -> np.ndarray:
    """Rows: normalised Fourier functions; columns: atoms (x_i, u_k) in
    node-major order."""
    B = fourier_gradient_basis(X, modes, normalise=True)  # (N, P, d)
    F = sys.eval(X)  # (N, d, m)
    BF = np.einsum("npd,ndj->npj", B, F)  # (N, P, m)
    A = np.einsum("npj,kj->pnk", BF, U)  # (P, N, K)
    return A.reshape(A.shape[0], -1)


def solve_mather_lp(grid: TorusGrid, ctrl: ControlGrid, K_modes: int, spec: LagrangianSpec,
                    sys: FieldSystem, tol: float = 1e-9) -> MatherLP:
    """min sum w L over atoms of grid x ctrl subject to closedness against
    the Fourier modes |k|_inf <= K_modes and sum w = 1.

    The crash basis is the u = 0 atom of smallest cost, which satisfies
    every closedness row; the remaining rows start on fixed artificials.
    """
    X, U = grid.nodes(), ctrl.points
    N, K = len(X), len(U)
    modes = fourier_modes(grid.d, K_modes)
    A = np.vstack([closedness_matrix(X, U, sys, modes), np.ones((1, N * K))])
    cost = spec.cost_table(X, U).reshape(-1)
    b = np.zeros(A.shape[0])
    b[-1] = 1.0
    z = ctrl.zero_index
    start = int(np.argmin(cost[z::K])) * K + z
    basis = [-(i + 1) for i in range(A.shape[0] - 1)] + [start]
    try:
        sol = revised_simplex(cost, A, b, basis, tol=tol)
    except LPError as exc:
        raise AssertionError(f"Mather LP failed although the u=0 atom is feasible: {exc}") from exc
    keep = np.flatnonzero(sol.x > 0)
    w = sol.x[keep] / math.fsum(sol.x[keep])
    mu = DiscreteMeasure(X[keep // K], U[keep % K], w, spec.sigma, {"atom_index": keep.tolist()})
    res = closedness_residual(mu, sys, K_modes) if K_modes >= 1 else 0.0
    duals = sol.duals[:-1]
    out = MatherLP(mu, sol.value, sol.dual_value, duals, modes, res, sol.slackness, sol.dual_infeasibility,
                   sol.iterations, tol, grid, ctrl,
                   {"n_columns": N * K, "n_rows": A.shape[0], "bland_pivots": sol.bland_pivots,
                    "y0": float(sol.duals[-1])})
    logger.info("Mather LP: value %.6g, %d atoms, residual %.3g, %d pivots", sol.value, len(keep), res, sol.iterations)
    return out


def weak_duality_bound(lp: MatherLP, mu: DiscreteMeasure, spec: LagrangianSpec, sys: FieldSystem) -> dict:
    """Upper bound on the LP value from an arbitrary probability measure.

    The atoms of ``mu`` are snapped to the LP product grid (nearest node,
    nearest control).  For any such w >= 0 with unit mass, nonnegative
    reduced costs give  value <= sum w L - theta . (A w),  where theta are
    the closedness multipliers and A w the closedness vector of w.  No
    feasibility repair is needed: the correction term pays for the residual.
    """
    X, U = lp.grid.nodes(), lp.ctrl.points
    states = X[[lp.grid.nearest_node(x) for x in mu.states]]
    dist = np.linalg.norm(mu.controls[:, None, :] - U[None, :, :], axis=2)
    controls = U[np.argmin(dist, axis=1)]
    snapped = DiscreteMeasure(states, controls, mu.weights, mu.sigma)
    action = snapped.action(spec)
    r = closedness_vector(snapped, sys, int(np.abs(lp.modes).max())) if len(lp.modes) else np.zeros(0)
    correction = float(lp.duals @ r) if len(r) else 0.0
    return {"action": action, "correction": correction, "bound": action - correction,
            "residual": float(np.max(np.abs(r))) if len(r) else 0.0}


# ---------------------------------------------------------------------------
# supports and checks


@dataclass
class MatherSet:
    states: np.ndarray  # full support, one row per atom
    controls: np.ndarray
    weights: np.ndarray
    projected: np.ndarray  # distinct states
    w_min: float


def mather_set(mu: DiscreteMeasure, w_min: float = 1e-6) -> MatherSet:
    keep = mu.weights >= w_min
    if not keep.any():
        new = float(mu.weights.max())
        warnings.warn(f"no atom reaches w_min={w_min:g}; lowered to {new:.3g}", stacklevel=2)
        w_min = new
        keep = mu.weights >= w_min
    S = mu.states[keep]
    proj = np.unique(np.round(np.mod(S, 1.0), 12), axis=0)
    return MatherSet(S, mu.controls[keep], mu.weights[keep], proj, w_min)


@dataclass
class InclusionReport:
    ok: bool
    max_dist: float
    per_point: np.ndarray


def inclusion_check(M_points: np.ndarray, A_nodes: np.ndarray, grid: TorusGrid,
                    shift_cells=None, tol_cells: float = 1.0) -> InclusionReport:
    """Every projected Mather point within ``tol_cells`` (Chebyshev, with
    wrap-around) of an Aubry node.  ``shift_cells`` translates the Mather
    points first, for negative controls."""
    P = np.atleast_2d(np.asarray(M_points, dtype=float))
    if shift_cells is not None:
        P = P + np.asarray(shift_cells, dtype=float) * grid.h
    Anodes = grid.nodes()[np.asarray(A_nodes, dtype=np.int64)]
    diff = torus_difference(Anodes[None, :, :], P[:, None, :])
    cheb = np.abs(diff).max(axis=-1).min(axis=1) / grid.h
    dist = np.round(cheb, 9)
    md = float(dist.max()) if len(dist) else 0.0
    return InclusionReport(bool(md <= tol_cells), md, dist)


def graph_residuals(mu: DiscreteMeasure, chi: ScalarField, spec: LagrangianSpec, sys: FieldSystem,
                    w_min: float = 1e-6, delta: float | None = None) -> np.ndarray:
    """|u - D_q L*(x, D_F chi(x))| for every atom with weight >= w_min."""
    delta = chi.grid.h if delta is None else delta
    out = []
    for x, u, w in zip(mu.states, mu.controls, mu.weights):
        if w < w_min:
            continue
        q, _ = horizontal_gradient(chi, sys, x, delta)
        u_star = spec.legendre_argmax(x, q)
        out.append(float(np.linalg.norm(u - u_star)))
    return np.array(out)


def graph_check(mu: DiscreteMeasure, chi: ScalarField, spec: LagrangianSpec, sys: FieldSystem,
                w_min: float = 1e-6, delta: float | None = None) -> float:
    """Largest distance between an atom's control and the feedback of chi."""
    r = graph_residuals(mu, chi, spec, sys, w_min, delta)
    return float(r.max()) if len(r) else 0.0


# ---------------------------------------------------------------------------
# CSV


def write_measure(path, mu: DiscreteMeasure, comments: list[str] | None = None) -> None:
    d, m = mu.states.shape[1], mu.controls.shape[1]
    cols = [f"x{i + 1}" for i in range(d)] + [f"u{j + 1}" for j in range(m)] + ["w"]
    with open(path, "w") as fh:
        for line in comments or []:
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for x, u, w in zip(mu.states, mu.controls, mu.weights):
            fh.write(",".join(repr(float(v)) for v in (*x, *u, w)) + "\n")


def read_measure(path, sigma: float = 2.0) -> DiscreteMeasure:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    cols = lines[0].split(",")
    d = sum(c.startswith("x") for c in cols)
    m = sum(c.startswith("u") for c in cols)
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, d + m + 1)
    return DiscreteMeasure(data[:, :d], data[:, d:d + m], data[:, -1], sigma)
