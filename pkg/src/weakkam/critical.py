"""Estimators of the critical constant and the sandwich certificate.

Four routes to the same number:

* long-time average of the finite-horizon value, V^T(0) / T;
* relative value iteration (see ``lax_oleinik.ergodic_iteration``);
* a lower bound -max_x H(x, D psi) over Fourier subsolution candidates psi;
* an upper bound, the minimal action of a closed measure from the LP.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .lagrangian import LagrangianSpec
from .lax_oleinik import SemiLagrangian, forward_value, n_steps, penalty_cone
from .sr_structure import ControlGrid, FieldSystem, ScalarField, TorusGrid

logger = logging.getLogger(__name__)


class SandwichError(RuntimeError):
    """c_lower <= c_ergodic <= c_upper fails beyond the allowed slack."""


def c_longtime(T_max: float, step: float, spec: LagrangianSpec, sys: FieldSystem, ctrl: ControlGrid,
               grid: TorusGrid, x0=None) -> tuple[float, ScalarField]:
    """V^{T_max}(x0) / T_max with V from ``forward_value`` (x0 defaults to the origin)."""
    V = forward_value(T_max, step, spec, sys, ctrl, grid)
    node = grid.nearest_node(np.zeros(grid.d) if x0 is None else np.asarray(x0, dtype=float))
    return float(V.flat[node] / T_max), V


# ---------------------------------------------------------------------------
# Fourier subsolutions


def fourier_modes(d: int, K: int) -> np.ndarray:
    """Integer vectors k with 0 < |k|_inf <= K, one per +-k pair (first
    nonzero entry positive), in lexicographic order."""
    out = []
    for k in itertools.product(range(-K, K + 1), repeat=d):
        k = np.array(k)
        nz = np.flatnonzero(k)
        if len(nz) and k[nz[0]] > 0:
            out.append(k)
    return np.array(out, dtype=np.int64).reshape(-1, d)


def fourier_gradient_basis(X: np.ndarray, modes: np.ndarray, normalise: bool = False) -> np.ndarray:
    """Gradients of cos(2 pi k.x) and sin(2 pi k.x) at the points X.

    Shape (len(X), 2 len(modes), d); column 2j is the cosine of mode j and
    2j+1 its sine.  With ``normalise`` each basis function is divided by
    2 pi |k|, so that sup |D phi| = 1.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    phase = 2 * np.pi * X @ modes.T.astype(float)
    scale = 2 * np.pi * modes.astype(float)
    if normalise:
        scale = scale / (2 * np.pi * np.linalg.norm(modes, axis=1))[:, None]
    out = np.empty((len(X), 2 * len(modes), X.shape[1]))
    out[:, 0::2, :] = -np.sin(phase)[:, :, None] * scale[None]
    out[:, 1::2, :] = np.cos(phase)[:, :, None] * scale[None]
    return out


def fourier_values(X: np.ndarray, modes: np.ndarray, coeffs: np.ndarray, normalise: bool = False) -> np.ndarray:
    """psi(X) for the basis of ``fourier_gradient_basis``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    phase = 2 * np.pi * X @ modes.T.astype(float)
    a, b = coeffs[0::2], coeffs[1::2]
    if normalise:
        nrm = 2 * np.pi * np.linalg.norm(modes, axis=1)
        a, b = a / nrm, b / nrm
    return np.cos(phase) @ a + np.sin(phase) @ b


@dataclass
class SubsolutionResult:
    c_lb: float
    coeffs: np.ndarray
    modes: np.ndarray
    K_modes: int
    sampling_gap: float  # max H on a 2x refined grid minus max H on the grid
    per_K: list = field(default_factory=list)
    history: list = field(default_factory=list, repr=False)


def _h_and_grad(spec, sys, X, Fx, B, theta):
    """H(x, D psi) at the nodes and its derivative in the coefficients."""
    d = X.shape[1]
    p = np.stack([B[:, :, a] @ theta for a in range(d)], axis=1)
    q = np.einsum("nij,ni->nj", Fx, p)
    Hx, u = spec.legendre_pair(X, q)
    Fu = np.einsum("ndj,nj->nd", Fx, u)
    dH = Fu[:, 0, None] * B[:, :, 0]  # dH/dtheta = B^T F D_q L*
    for a in range(1, d):
        dH = dH + Fu[:, a, None] * B[:, :, a]
    return Hx, dH


def c_lower_subsolution(K_modes: int, spec: LagrangianSpec, sys: FieldSystem, grid: TorusGrid,
                        iters: int = 400, restarts: int = 6, step0: float | None = None,
                        beta0: float = 20.0, beta_growth: float = 3.0, seed: int = 0,
                        max_coeff: float = 1e3) -> SubsolutionResult:
    """Lower bound -max_grid H(x, D psi) over Fourier sums of order <= K_modes.

    Minimises the softmax (log-sum-exp, inverse temperature beta) of
    H(x, D psi(x)) over the nodes by normalised subgradient steps of length
    step0 / sqrt(k) (default 0.05 / (2 pi K)).  Each restart starts from the
    best coefficients so far (Polyak restart) with beta multiplied by
    ``beta_growth`` and the step halved.  Orders 0, 1, ..., K_modes are
    solved in turn, each warm-started from the previous optimum, so the
    returned bound is nondecreasing in K_modes.  The bound is always
    evaluated on the unsmoothed max.
    """
    if K_modes < 0:
        raise ValueError("K_modes must be nonnegative")
    rng = np.random.default_rng(seed)
    X = grid.nodes()
    Fx = sys.eval(X)
    fine = TorusGrid(grid.d, 2 * grid.n)
    Xf, Ff = fine.nodes(), sys.eval(fine.nodes())

    theta = np.zeros(0)
    modes = np.zeros((0, grid.d), dtype=np.int64)
    B = np.zeros((len(X), 0, grid.d))
    best_val = float(np.max(spec.legendre(X, np.zeros((len(X), spec.m)))))
    per_K = [(0, -best_val + 0.0)]
    history = []
    for K in range(1, K_modes + 1):
        new_modes = fourier_modes(grid.d, K)
        old = {tuple(k): j for j, k in enumerate(modes)}
        grown = np.zeros(2 * len(new_modes))
        for j, k in enumerate(new_modes):
            if tuple(k) in old:
                grown[2 * j: 2 * j + 2] = theta[2 * old[tuple(k)]: 2 * old[tuple(k)] + 2]
        modes, theta = new_modes, grown
        B = np.asfortranarray(fourier_gradient_basis(X, modes))
        best_theta = theta.copy()
        beta = beta0
        lr = step0 if step0 is not None else 0.05 / (2 * np.pi * K)
        for r in range(restarts):
            theta = best_theta.copy()
            if r:
                # small seeded kick so a restart can leave a kink
                theta += rng.normal(scale=1e-2 * lr, size=theta.shape)
            for k in range(1, iters + 1):
                Hx, dH = _h_and_grad(spec, sys, X, Fx, B, theta)
                top = float(Hx.max())
                if top < best_val:
                    best_val, best_theta = top, theta.copy()
                wts = np.exp(beta * (Hx - top))
                g = (wts / wts.sum()) @ dH
                gn = float(np.linalg.norm(g))
                if gn == 0.0:
                    break
                theta = theta - lr / math.sqrt(k) * g / gn
                if not np.all(np.isfinite(theta)) or np.abs(theta).max() > max_coeff:
                    raise FloatingPointError("subgradient coefficients diverged; reduce the step")
            history.append((K, r, beta, best_val))
            beta *= beta_growth
            lr *= 0.5
        theta = best_theta
        per_K.append((K, -best_val + 0.0))
        logger.debug("subsolution K=%d: c_lb=%.6g", K, -best_val)

    Hf, _ = _h_and_grad(spec, sys, Xf, Ff, fourier_gradient_basis(Xf, modes), theta)
    gap = float(Hf.max()) - best_val
    return SubsolutionResult(-best_val + 0.0, theta, modes, K_modes, gap, per_K, history)


def c_upper_measure(lp) -> float:
    """The LP optimum, the action of the best closed measure found."""
    if lp.residual > max(lp.tol, 1e-9) * 1e3:
        raise ValueError(f"LP constraint residual {lp.residual:.3g} exceeds tolerance")
    return float(lp.value)


# ---------------------------------------------------------------------------


def mane_potential(x, c: float, op: SemiLagrangian, T_max: float, t_grid=None,
                   slope: float = 50.0) -> ScalarField:
    """y -> min over t in t_grid of A_t(x, y) - c t, together with the t = 0
    term (zero at the source node).

    By default every step multiple up to T_max is used, which contains any
    dyadic grid refined near small t.
    """
    grid = op.grid
    src = grid.nearest_node(np.asarray(x, dtype=float))
    K = n_steps(T_max, op.step)
    keep = None if t_grid is None else {n_steps(t, op.step) for t in t_grid}
    A = penalty_cone(grid, np.array([src]), slope)
    best = np.full(grid.size, np.inf)
    best[src] = 0.0
    for k in range(1, K + 1):
        A = op.apply_many(A)
        if keep is None or k in keep:
            best = np.minimum(best, A[:, 0] - c * k * op.step)
    return ScalarField(grid, best, {"time_horizon": T_max, "shift": 0.0,
                                    "provenance": f"mane_potential(source={src}, c={c!r})"})


# ---------------------------------------------------------------------------


@dataclass
class CriticalCertificate:
    c_longtime: float
    c_ergodic: float
    c_lower: float
    c_upper: float
    gap: float
    resolutions: dict
    slack: float
    details: dict = field(default_factory=dict)

    def check(self) -> list[str]:
        """Violated sandwich invariants (empty when the certificate holds)."""
        bad = []
        if self.c_lower - self.slack > self.c_ergodic:
            bad.append(f"c_lower={self.c_lower:.6g} exceeds c_ergodic={self.c_ergodic:.6g} by more than {self.slack}")
        if self.c_ergodic > self.c_upper + self.slack:
            bad.append(f"c_ergodic={self.c_ergodic:.6g} exceeds c_upper={self.c_upper:.6g} by more than {self.slack}")
        if self.gap < -self.slack:
            bad.append(f"negative gap {self.gap:.6g}")
        return bad

    def to_dict(self) -> dict:
        return asdict(self)


def assemble_certificate(c_long: float, c_erg: float, c_low: float, c_up: float, resolutions: dict,
                         slack: float, details: dict | None = None, strict: bool = True) -> CriticalCertificate:
    cert = CriticalCertificate(float(c_long), float(c_erg), float(c_low), float(c_up),
                               float(c_up - c_low), dict(resolutions), float(slack), dict(details or {}))
    bad = cert.check()
    if bad and strict:
        raise SandwichError("; ".join(bad) + " -- refine n, n_u or the step, or raise K_modes")
    return cert
