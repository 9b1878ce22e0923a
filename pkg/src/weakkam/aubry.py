"""Peierls barrier, projected Aubry set and the pointwise checks around them
(domination, fixed-point identity of barrier rows, horizontal gradients,
Lipschitz bounds in the sub-Riemannian distance)."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._kernels import displacement, minplus
from .lagrangian import LagrangianSpec
from .lax_oleinik import SemiLagrangian, action_fields, n_steps, penalty_cone
from .sr_structure import ControlGrid, FieldSystem, ScalarField, TorusGrid, interpolate

logger = logging.getLogger(__name__)


@dataclass
class BarrierMatrix:
    """h(x_i, y_j) for source nodes x_i and target nodes y_j (flat indices)."""

    grid: TorusGrid
    sources: np.ndarray
    targets: np.ndarray
    values: np.ndarray
    c_used: float
    t_window: tuple[float, float]
    times: list = field(default_factory=list)
    octave_change: np.ndarray | None = field(default=None, repr=False)
    eps_num: float = 0.0
    eps_diag: float = 0.0
    stab_tol: float = 1e-3

    def __post_init__(self):
        self._col = {int(t): j for j, t in enumerate(self.targets)}

    def value(self, i_node: int, j_node: int) -> float:
        i = int(np.flatnonzero(self.sources == i_node)[0])
        return float(self.values[i, self._col[int(j_node)]])

    def diagonal(self) -> np.ndarray:
        return np.array([self.values[i, self._col[int(s)]] for i, s in enumerate(self.sources)])

    def row_field(self, i: int) -> ScalarField:
        if len(self.targets) != self.grid.size:
            raise ValueError("row fields need the full target grid")
        return ScalarField(self.grid, self.values[i], {"provenance": f"barrier row of node {self.sources[i]}",
                                                       "time_horizon": None, "shift": 0.0})

    def refine_rows(self, op: SemiLagrangian, which=None, T_min: float | None = None,
                    T_max: float | None = None, slope: float = 50.0) -> np.ndarray:
        """Replace rows by direct single-source evaluations (see ``barrier_rows``).

        ``which`` indexes into ``sources``; by default every source.  Each
        refined row is the pointwise min of the old and the direct value,
        both being upper estimates of the same quantity.
        """
        which = np.arange(len(self.sources)) if which is None else np.atleast_1d(np.asarray(which))
        T_min = self.t_window[0] if T_min is None else T_min
        T_max = self.t_window[1] if T_max is None else T_max
        rows = barrier_rows(self.c_used, op, self.sources[which], T_min, T_max, slope)
        self.values[which] = np.minimum(self.values[which], rows)
        return which

    @property
    def unstable_pairs(self) -> int:
        if self.octave_change is None:
            return 0
        return int(np.count_nonzero(self.octave_change > self.stab_tol))


def stratified_sources(grid: TorusGrid, max_sources: int = 1024) -> np.ndarray:
    """All nodes when they fit, otherwise every k-th node per axis."""
    if grid.size <= max_sources:
        return np.arange(grid.size)
    stride = 1
    while (grid.n // stride) ** grid.d > max_sources or grid.n % stride:
        stride += 1
    axes = np.meshgrid(*([np.arange(0, grid.n, stride)] * grid.d), indexing="ij")
    return np.sort(grid.flat_index(np.stack([a.ravel() for a in axes], -1)))


def peierls_barrier(c: float, op: SemiLagrangian, sources=None, base_steps: int = 8,
                    T_min: float = 1.0, T_max: float = 20.0, slope: float = 50.0,
                    stab_tol: float = 1e-3) -> BarrierMatrix:
    """h(x, y) = min over dyadic t in [T_min, T_max] of A_t(x, y) - c t.

    A at the base time ``base_steps * step`` comes from the semi-Lagrangian
    action on all targets; longer times come from min-plus doubling through
    the source node set.  ``octave_change`` holds, per pair, how much the
    running minimum dropped over the last octave.
    """
    grid = op.grid
    S = stratified_sources(grid) if sources is None else np.asarray(sources, dtype=np.int64)
    t = base_steps * op.step
    if T_max < t:
        raise ValueError(f"T_max={T_max} below the base time {t}")
    A_SN = np.ascontiguousarray(action_fields(op, S, [base_steps], slope)[0].T)
    A_SS = np.ascontiguousarray(A_SN[:, S])
    h = np.full(A_SN.shape, np.inf)
    h_prev = h
    times = []
    while True:
        if t >= T_min - 1e-12:
            h_prev = h
            h = np.minimum(h, A_SN - c * t)
            times.append(t)
        if 2 * t > T_max + 1e-12:
            break
        A_SN = minplus(A_SS, A_SN)
        A_SS = np.ascontiguousarray(A_SN[:, S])
        t *= 2
    if not times:
        raise ValueError(f"no dyadic time in [{T_min}, {T_max}] starting from {base_steps * op.step}")
    change = np.where(np.isfinite(h_prev), h_prev - h, 0.0)
    bm = BarrierMatrix(grid, S, np.arange(grid.size), h, c, (times[0], times[-1]), times, change,
                       stab_tol=stab_tol)
    diag = bm.diagonal()
    diag_change = np.array([change[i, s] for i, s in enumerate(S)])
    # slack = diagonal deficit + largest drop over the last octave (a proxy for
    # the truncation error of the finite time window).  eps_diag only looks at
    # diagonal pairs and sets the Aubry threshold; eps_num covers all pairs and
    # bounds pairwise inequalities.
    deficit = max(0.0, -float(diag.min()))
    bm.eps_diag = deficit + float(diag_change.max())
    bm.eps_num = deficit + float(change.max())
    if bm.unstable_pairs:
        logger.info("%d of %d barrier pairs changed by more than %g over the last octave",
                    bm.unstable_pairs, change.size, stab_tol)
    return bm


def barrier_rows(c: float, op: SemiLagrangian, sources, T_min: float = 1.0, T_max: float = 20.0,
                 slope: float = 50.0) -> np.ndarray:
    """min over every step t in [T_min, T_max] of A_t(x_s, y) - c t, shape (S, N).

    One semi-Lagrangian run per source up to T_max, with no node-restricted
    concatenation.  Concatenating short actions through grid nodes pays an
    interpolation error at each junction, which is large across directions
    where the frame degenerates; direct runs avoid it at higher cost.
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    k_min, k_max = n_steps(T_min, op.step), n_steps(T_max, op.step)
    A = penalty_cone(op.grid, sources, slope)
    best = np.full(A.shape, np.inf)
    for k in range(1, k_max + 1):
        A = op.apply_many(A)
        if k >= k_min:
            best = np.minimum(best, A - c * k * op.step)
    return np.ascontiguousarray(best.T)


def aubry_set(h: BarrierMatrix, eps: float | None = None) -> tuple[np.ndarray, float]:
    """Source nodes with |h(x, x)| <= eps (default 3 eps_diag, floored at 1e-9)."""
    diag = h.diagonal()
    eps = 3.0 * h.eps_diag if eps is None else eps
    eps = max(eps, 1e-9)
    nodes = h.sources[np.abs(diag) <= eps]
    if len(nodes) == 0:
        eps_min = float(np.min(np.abs(diag)))
        warnings.warn(f"Aubry set empty at eps={eps:.3g}; using minimal eps={eps_min:.3g}", stacklevel=2)
        eps = eps_min
        nodes = h.sources[np.abs(diag) <= eps]
    return nodes, eps


def horizontal_gradient(chi: ScalarField, sys: FieldSystem, x, delta: float) -> tuple[np.ndarray, float]:
    """Central differences of chi along the columns of F(x).

    Returns the m-covector and the largest disagreement between forward
    and backward one-sided differences (a nondifferentiability indicator).
    """
    h = chi.grid.h
    if not (h / 4 < delta < 4 * h):
        raise ValueError(f"delta={delta} outside (h/4, 4h) for h={h}")
    x = np.asarray(x, dtype=float)
    F = sys.eval(x)
    c0 = interpolate(chi, x)
    q = np.empty(sys.m)
    gap = 0.0
    for i in range(sys.m):
        plus = interpolate(chi, x + delta * F[:, i])
        minus = interpolate(chi, x - delta * F[:, i])
        q[i] = (plus - minus) / (2 * delta)
        gap = max(gap, abs((plus - c0) / delta - (c0 - minus) / delta))
    return q, gap


def random_trajectories(grid: TorusGrid, sys: FieldSystem, ctrl: ControlGrid, step: float,
                        n_samples: int, seed: int, duration=(1.0, 5.0), piece=(5, 25)):
    """Random piecewise-constant admissible discrete pairs (explicit Euler)."""
    rng = np.random.default_rng(seed)
    X = grid.nodes()
    for _ in range(n_samples):
        K = max(1, int(round(rng.uniform(*duration) / step)))
        x = X[rng.integers(grid.size)].copy()
        states = [x]
        controls = []
        while len(controls) < K:
            u = ctrl.points[rng.integers(len(ctrl))]
            controls.extend([u] * int(rng.integers(piece[0], piece[1] + 1)))
        controls = np.array(controls[:K])
        for k in range(K):
            x = np.mod(x + step * displacement(sys.eval(x)[None], controls[k][None])[0], 1.0)
            states.append(x)
        yield np.array(states), controls


def check_domination(phi: ScalarField, c: float, spec: LagrangianSpec, sys: FieldSystem, ctrl: ControlGrid,
                     step: float, n_samples: int = 100, seed: int = 0, duration=(1.0, 5.0)) -> float:
    """max over random discrete pairs of
    phi(gamma(b)) - phi(gamma(a)) - sum step L(gamma_{k+1}, u_k) + c (b - a).

    The running cost is charged at the arrival point of each step, matching
    the backward operator.
    """
    worst = -np.inf
    for states, controls in random_trajectories(phi.grid, sys, ctrl, step, n_samples, seed, duration):
        action = step * float(np.sum(spec.eval(states[1:], controls)))
        T = step * len(controls)
        ends = interpolate(phi, np.stack([states[0], states[-1]]))
        worst = max(worst, ends[1] - ends[0] - action + c * T)
    return float(worst)


def barrier_fixed_point_check(h_row: ScalarField, c: float, t_check: float, op: SemiLagrangian) -> float:
    """sup |T_t h_row - c t - h_row| with T_t as repeated backward steps."""
    K = int(round(t_check / op.step))
    v = h_row.flat.copy()
    for _ in range(K):
        v, _ = op.apply_flat(v)
    return float(np.max(np.abs(v - c * K * op.step - h_row.flat)))


def lipschitz_check(phi: ScalarField, d_sr_fields: dict[int, ScalarField]) -> float:
    """max over sampled sources x and all nodes y of
    |phi(x) - phi(y)| / max(d_SR(x, y), h)."""
    h = phi.grid.h
    best = 0.0
    for src, dist in d_sr_fields.items():
        ratio = np.abs(phi.flat - phi.flat[src]) / np.maximum(dist.flat, h)
        best = max(best, float(ratio.max()))
    return best


def aubry_hausdorff_cells(coarse_nodes, coarse: TorusGrid, fine_nodes, fine: TorusGrid) -> float:
    """Largest distance, in coarse cells, from a fine-grid Aubry node to the
    nearest coarse-grid Aubry node."""
    Xc = coarse.nodes()[np.asarray(coarse_nodes)]
    Xf = fine.nodes()[np.asarray(fine_nodes)]
    diff = Xf[:, None, :] - Xc[None, :, :]
    diff -= np.rint(diff)
    cheb = np.abs(diff).max(axis=-1).min(axis=1)
    return float(cheb.max() / coarse.h)
