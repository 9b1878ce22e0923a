"""Semi-Lagrangian dynamic programming: the discrete Lax-Oleinik operator,
finite-horizon value functions, the fundamental solution A_t, relative value
iteration for the critical constant and feedback integration of calibrated
curves.

Foot points use explicit Euler with the frame frozen at the node being
updated; the operator is a min over controls of multilinear interpolants,
hence monotone and commuting with constants.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._kernels import displacement, gather, minplus, periodic_stencil, sl_min_multi
from .lagrangian import LagrangianSpec
from .sr_structure import (
    ControlGrid,
    FieldSystem,
    ScalarField,
    TorusGrid,
    interpolate,
    torus_difference,
)

logger = logging.getLogger(__name__)

DEFAULT_CFL_CELLS = 8.0


class CFLError(ValueError):
    """Time step moves foot points further than the configured cell bound."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, amplitude: float):
        super().__init__(message)
        self.amplitude = amplitude


def cfl_check(grid: TorusGrid, sys: FieldSystem, ctrl: ControlGrid, step: float,
              cfl_cells: float = DEFAULT_CFL_CELLS) -> float:
    """Return the largest foot displacement in cells; raise if above the bound."""
    if step <= 0:
        raise ValueError("time step must be positive")
    cells = step * ctrl.radius * sys.max_norm(grid) / grid.h
    if cells > cfl_cells:
        raise CFLError(
            f"step {step} x radius {ctrl.radius:.4g} moves {cells:.2f} cells > bound {cfl_cells}; "
            "reduce the step or the control radius"
        )
    return cells


def n_steps(T: float, step: float) -> int:
    K = int(round(T / step))
    if K < 0 or abs(K * step - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"horizon {T} is not an integer multiple of the step {step}")
    return K


class SemiLagrangian:
    """One step of the discrete semigroup with cached foot-point stencils.

    ``direction='backward'`` is the Lax-Oleinik step
    (T phi)(x) = min_u phi(x - step F(x) u) + step L(x, u);
    ``direction='forward'`` uses foot points x + step F(x) u, i.e. arcs that
    leave x (finite-horizon value functions).
    """

    def __init__(self, grid: TorusGrid, sys: FieldSystem, spec: LagrangianSpec, ctrl: ControlGrid,
                 step: float, direction: str = "backward", cfl_cells: float = DEFAULT_CFL_CELLS,
                 cost: np.ndarray | None = None):
        if direction not in ("backward", "forward"):
            raise ValueError(f"direction must be 'backward' or 'forward', got {direction!r}")
        if sys.d != grid.d or spec.d != grid.d or sys.m != spec.m or ctrl.m != sys.m:
            raise ValueError("grid, frame, Lagrangian and control dimensions disagree")
        self.cells = cfl_check(grid, sys, ctrl, step, cfl_cells)
        self.grid, self.sys, self.spec, self.ctrl = grid, sys, spec, ctrl
        self.step = step
        self.direction = direction
        sign = -1.0 if direction == "backward" else 1.0
        X = grid.nodes()
        F = sys.eval(X)
        feet = X[:, None, :] + sign * step * displacement(F[:, None], ctrl.points[None])
        idx, w = periodic_stencil(grid.n, grid.d, feet.reshape(-1, grid.d))
        N, K = grid.size, len(ctrl)
        self.idx = idx.reshape(N, K, -1)
        self.w = w.reshape(N, K, -1)
        self.L = spec.cost_table(X, ctrl.points) if cost is None else cost
        self.cost = step * self.L

    def candidates(self, flat: np.ndarray) -> np.ndarray:
        """All candidate values, shape (nodes, controls)."""
        return gather(flat, self.idx, self.w) + self.cost

    def apply_flat(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = self.candidates(flat)
        k = np.argmin(q, axis=1)  # first minimiser = lowest control index
        return q[np.arange(len(k)), k], k

    def __call__(self, phi: ScalarField) -> ScalarField:
        vals, _ = self.apply_flat(phi.flat)
        return phi.with_values(vals.reshape(phi.grid.shape))

    def apply_many(self, values: np.ndarray) -> np.ndarray:
        """Apply to many fields at once; ``values`` has shape (nodes, fields)."""
        values = np.ascontiguousarray(values, dtype=float)
        out = np.empty_like(values)
        sl_min_multi(values, self.idx, self.w, np.ascontiguousarray(self.cost), out)
        return out

    def policy_at(self, values: np.ndarray, x: np.ndarray) -> tuple[int, float]:
        """Best control index and value at an arbitrary point x (off-grid)."""
        F = self.sys.eval(x)
        sign = -1.0 if self.direction == "backward" else 1.0
        feet = x[None, :] + sign * self.step * displacement(F[None], self.ctrl.points)
        idx, w = periodic_stencil(self.grid.n, self.grid.d, feet)
        q = gather(values, idx, w) + self.step * self.spec.eval(x[None, :], self.ctrl.points)
        k = int(np.argmin(q))
        return k, float(q[k])


# ---------------------------------------------------------------------------


def backward_step(phi: ScalarField, step: float, spec: LagrangianSpec, sys: FieldSystem,
                  ctrl: ControlGrid, cfl_cells: float = DEFAULT_CFL_CELLS) -> ScalarField:
    """(T_step phi)(x) = min_u phi(x - step F(x) u) + step L(x, u) at every node."""
    op = SemiLagrangian(phi.grid, sys, spec, ctrl, step, "backward", cfl_cells)
    return op(phi)


def forward_value(T: float, step: float, spec: LagrangianSpec, sys: FieldSystem, ctrl: ControlGrid,
                  grid: TorusGrid, cfl_cells: float = DEFAULT_CFL_CELLS,
                  keep_history: bool = False):
    """Finite-horizon value V^T with V^0 = 0 and
    V^{t+step}(x) = min_u step L(x, u) + V^t(x + step F(x) u).

    With ``keep_history`` also returns the list [V^0, V^step, ..., V^T] of
    flat arrays (needed to replay optimal trajectories).
    """
    K = n_steps(T, step)
    op = SemiLagrangian(grid, sys, spec, ctrl, step, "forward", cfl_cells)
    v = np.zeros(grid.size)
    history = [v] if keep_history else None
    for _ in range(K):
        v, _ = op.apply_flat(v)
        if keep_history:
            history.append(v)
    out = ScalarField(grid, v.reshape(grid.shape), {"time_horizon": T, "shift": 0.0, "provenance": "forward_value"})
    return (out, history) if keep_history else out


def penalty_cone(grid: TorusGrid, sources: np.ndarray, slope: float) -> np.ndarray:
    """slope * |y - x_s| (torus Euclidean) for every node y and source s;
    shape (nodes, sources)."""
    X = grid.nodes()
    diff = torus_difference(X[sources][None, :, :], X[:, None, :])
    return slope * np.sqrt(np.sum(diff**2, axis=-1))


def action_fields(op: SemiLagrangian, sources, steps_list, slope: float = 50.0) -> list[np.ndarray]:
    """A_t(x_s, y) for several sources at once, for each requested step count.

    Returns arrays of shape (nodes, sources).  The initial datum is zero at
    the source and a steep cone elsewhere, which stands in for the +inf mask
    of the exact fundamental solution.
    """
    if op.direction != "backward":
        raise ValueError("the action is propagated in arrival form (backward operator)")
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    steps_list = list(steps_list)
    if steps_list != sorted(steps_list) or (steps_list and steps_list[0] < 0):
        raise ValueError("step counts must be increasing and nonnegative")
    A = penalty_cone(op.grid, sources, slope)
    out = []
    done = 0
    for k in steps_list:
        for _ in range(k - done):
            A = op.apply_many(A)
        done = k
        out.append(A.copy())
    return out


def action_field(x_src, t_list, step: float, spec: LagrangianSpec, sys: FieldSystem, ctrl: ControlGrid,
                 grid: TorusGrid, slope: float = 50.0, cfl_cells: float = DEFAULT_CFL_CELLS) -> list[ScalarField]:
    """y -> A_t(x_src, y) for each t in ``t_list`` (multiples of ``step``)."""
    x_src = np.asarray(x_src, dtype=float)
    src = grid.nearest_node(x_src)
    node = grid.nodes()[src]
    if np.max(np.abs(torus_difference(node, x_src))) > 1e-12:
        warnings.warn(f"action source {tuple(x_src)} snapped to node {tuple(node)}", stacklevel=2)
    ks = [n_steps(t, step) for t in t_list]
    op = SemiLagrangian(grid, sys, spec, ctrl, step, "backward", cfl_cells)
    fields = action_fields(op, [src], ks, slope)
    return [
        ScalarField(grid, A[:, 0].reshape(grid.shape),
                    {"time_horizon": t, "shift": 0.0, "provenance": f"action_field(source={src})"})
        for t, A in zip(t_list, fields)
    ]


def minplus_double(A: np.ndarray) -> np.ndarray:
    """A_{2t}(x, z) = min_y A_t(x, y) + A_t(y, z)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("min-plus doubling needs a square matrix")
    return minplus(A, A)


# ---------------------------------------------------------------------------


@dataclass
class ErgodicResult:
    c: float
    chi: ScalarField
    iterations: int
    last_update: float
    trace: list = field(default_factory=list, repr=False)


def ergodic_iteration(step: float, tol: float, max_iters: int, spec: LagrangianSpec, sys: FieldSystem,
                      ctrl: ControlGrid, grid: TorusGrid, direction: str = "backward",
                      x_ref=None, chi0: ScalarField | None = None,
                      op: SemiLagrangian | None = None, cfl_cells: float = DEFAULT_CFL_CELLS) -> ErgodicResult:
    """Relative value iteration chi <- T chi - (T chi)(x_ref).

    Stops when the sup-norm change drops below tol * step.  Returns the
    normalised fixed point (chi(x_ref) = 0) and c = (T chi)(x_ref) / step.
    ``trace`` records (iteration, c estimate, update) every 10 iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    op = op or SemiLagrangian(grid, sys, spec, ctrl, step, direction, cfl_cells)
    ref = grid.nearest_node(np.zeros(grid.d) if x_ref is None else np.asarray(x_ref, dtype=float))
    chi = np.zeros(grid.size) if chi0 is None else chi0.flat - chi0.flat[ref]
    trace = []
    recent_c = []
    delta = math.inf
    for it in range(1, max_iters + 1):
        t, _ = op.apply_flat(chi)
        c = t[ref] / step
        new = t - t[ref]
        delta = float(np.max(np.abs(new - chi)))
        chi = new
        recent_c.append(c)
        if it % 10 == 0 or it == 1:
            trace.append((it, c, delta))
        if delta < tol * step:
            trace.append((it, c, delta))
            break
    else:
        tail = recent_c[-100:]
        amp = float(max(tail) - min(tail))
        raise NonConvergenceError(
            f"relative value iteration did not converge in {max_iters} iterations "
            f"(last update {delta:.3g}, c oscillation amplitude {amp:.3g})", amp)
    meta = {"time_horizon": None, "shift": 0.0, "provenance": f"ergodic_iteration({direction})", "c": c}
    return ErgodicResult(float(c), ScalarField(grid, chi.reshape(grid.shape), meta), it, delta, trace)


# ---------------------------------------------------------------------------


@dataclass
class TrajectorySample:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    running_cost: np.ndarray
    C_step: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def total_cost(self) -> float:
        return float(self.running_cost[-1])


def _euler_step(sys: FieldSystem, x: np.ndarray, u: np.ndarray, step: float) -> np.ndarray:
    return np.mod(x + step * displacement(sys.eval(x)[None], u[None])[0], 1.0)


def one_step_defect(traj: TrajectorySample, sys: FieldSystem) -> float:
    """max_k |x_{k+1} - x_k - step F(x_k) u_k| / step^2 (torus differences)."""
    dt = np.diff(traj.times)
    if len(dt) == 0:
        return 0.0
    F = sys.eval(traj.states[:-1])
    pred = displacement(F, traj.controls[:-1])
    actual = torus_difference(traj.states[:-1], traj.states[1:])
    err = np.linalg.norm(actual - dt[:, None] * pred, axis=1)
    return float(np.max(err / dt**2))


def gradient(chi: ScalarField, x: np.ndarray, delta: float | None = None) -> np.ndarray:
    """Central differences of the interpolant of chi at x, spacing ``delta``
    (defaults to the grid spacing)."""
    delta = chi.grid.h if delta is None else delta
    x = np.asarray(x, dtype=float)
    g = np.empty(chi.grid.d)
    for i in range(chi.grid.d):
        e = np.zeros(chi.grid.d)
        e[i] = delta
        g[i] = (interpolate(chi, x + e) - interpolate(chi, x - e)) / (2 * delta)
    return g


def feedback_control(chi: ScalarField, x, spec: LagrangianSpec, sys: FieldSystem,
                     ctrl: ControlGrid | None = None) -> np.ndarray:
    """u = D_q L*(x, F(x)^T grad chi(x)); for mane this is F^T grad chi + V."""
    x = np.asarray(x, dtype=float)
    return spec.feedback(sys, x, gradient(chi, x), ctrl)


def calibrated_curve(chi: ScalarField, x0, horizon: float, step: float, spec: LagrangianSpec,
                     sys: FieldSystem, c: float, ctrl: ControlGrid | None = None) -> TrajectorySample:
    """Calibrated curve of a backward fixed point chi ending at x0.

    chi satisfies chi(x) = min_u chi(x - step F(x) u) + step (L(x, u) - c), so
    calibrated arcs arrive at x with the feedback control; the curve is built
    by explicit Euler backward in time from x0 and returned on [-T, 0] in
    increasing time.  ``meta['defect']`` is
    |chi(x0) - chi(gamma(-T)) - int L + c T|.
    """
    K = n_steps(horizon, step)
    x = np.mod(np.asarray(x0, dtype=float), 1.0)
    states = [x]
    controls = [feedback_control(chi, x, spec, sys, ctrl)]
    seg = []
    for _ in range(K):
        u = controls[-1]
        seg.append(step * float(spec.eval(x, u)))
        x = _euler_step(sys, x, u, -step)
        states.append(x)
        controls.append(feedback_control(chi, x, spec, sys, ctrl))
    states, seg = states[::-1], seg[::-1]
    # controls[k] drives segment k (states[k] -> states[k + 1]); it was computed at the arrival point
    controls = controls[::-1][1:] + [controls[0]]
    costs = np.concatenate([[0.0], np.cumsum(seg)])
    traj = TrajectorySample(np.arange(-K, 1) * step, np.array(states), np.array(controls), costs)
    traj.C_step = one_step_defect(traj, sys)
    defect = abs(interpolate(chi, states[-1]) - interpolate(chi, states[0]) - costs[-1] + c * horizon)
    traj.meta.update({"defect": float(defect), "c": c, "horizon": horizon})
    return traj


# ---------------------------------------------------------------------------
# plain-text field format


def write_field(path, fld: ScalarField, comments: list[str] | None = None) -> None:
    """Header ``d n time shift`` then one value per line, row-major.
    Values use repr(), which round-trips float64 exactly."""
    t = fld.meta.get("time_horizon")
    with open(path, "w") as fh:
        for line in comments or []:
            fh.write(f"# {line}\n")
        fh.write(f"{fld.grid.d} {fld.grid.n} {repr(float(t)) if t is not None else 'nan'} "
                 f"{repr(float(fld.meta.get('shift', 0.0)))}\n")
        fh.write("\n".join(repr(float(v)) for v in fld.flat))
        fh.write("\n")


def read_field(path) -> ScalarField:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    d, n, t, shift = lines[0].split()
    grid = TorusGrid(int(d), int(n))
    vals = np.array([float(v) for v in lines[1:]])
    if len(vals) != grid.size:
        raise ValueError(f"{path}: expected {grid.size} values, found {len(vals)}")
    t = float(t)
    return ScalarField(grid, vals, {"time_horizon": None if math.isnan(t) else t, "shift": float(shift)})
