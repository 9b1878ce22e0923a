"""Dense revised simplex for  min c.x  s.t.  A x = b,  x >= 0.

Sized for the occupation-measure LPs (a few thousand columns, at most a
few hundred rows).  The caller supplies a feasible crash basis; rows that
have no natural basic column get an artificial column fixed to [0, 0],
which leaves the basis as soon as any pivot touches its row and never
re-enters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class LPError(RuntimeError):
    pass


@dataclass
class LPSolution:
    x: np.ndarray
    value: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int
    bland_pivots: int
    basis: np.ndarray
    residual: float          # ||A x - b||_inf, recomputed from scratch
    dual_infeasibility: float  # max(0, -min reduced cost)
    slackness: float         # max |x_j * r_j|
    rhs: np.ndarray

    @property
    def dual_value(self) -> float:
        return float(self.rhs @ self.duals)


def revised_simplex(c, A, b, basis, tol: float = 1e-9, max_iter: int = 50_000,
                    refactor_every: int = 50, degenerate_switch: int = 30) -> LPSolution:
    """Solve from a feasible starting basis.

    ``basis`` lists one column per row; a negative entry ``-(i+1)`` puts the
    artificial column e_i in that slot.  Pricing is Dantzig's rule; after
    ``degenerate_switch`` consecutive zero-length pivots it falls back to
    Bland's rule until the objective moves again.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    basis = np.array(basis, dtype=np.int64)
    if basis.shape != (m,):
        raise ValueError(f"basis needs {m} entries, got {basis.shape}")

    def column(j):
        if j >= 0:
            return A[:, j]
        e = np.zeros(m)
        e[-j - 1] = 1.0
        return e

    def factor():
        B = np.column_stack([column(j) for j in basis])
        try:
            return np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise LPError("singular basis") from exc

    Binv = factor()
    xB = Binv @ b
    if np.any(xB[basis >= 0] < -1e3 * tol) or np.any(np.abs(xB[basis < 0]) > 1e3 * tol):
        raise LPError("starting basis is not feasible")
    xB = np.where(basis >= 0, np.maximum(xB, 0.0), 0.0)

    it = 0
    bland = False
    bland_pivots = 0
    degenerate_run = 0
    since_factor = 0
    while True:
        cB = np.array([c[j] if j >= 0 else 0.0 for j in basis])
        y = cB @ Binv
        r = c - y @ A
        r[basis[basis >= 0]] = 0.0
        candidates = np.flatnonzero(r < -tol)
        if len(candidates) == 0:
            break
        if it >= max_iter:
            raise LPError(f"simplex iteration limit {max_iter} reached")
        q = int(candidates[0]) if bland else int(candidates[np.argmin(r[candidates])])
        d = Binv @ A[:, q]

        ratios = np.full(m, np.inf)
        art = basis < 0
        ratios[art & (np.abs(d) > tol)] = 0.0
        pos = ~art & (d > tol)
        ratios[pos] = xB[pos] / d[pos]
        theta = ratios.min()
        if not np.isfinite(theta):
            raise LPError("LP is unbounded")
        ties = np.flatnonzero(ratios <= theta + tol * max(1.0, theta))
        if bland:
            p = int(ties[np.argmin(basis[ties])])
            bland_pivots += 1
        else:
            p = int(ties[np.argmax(np.abs(d[ties]))])

        xB = xB - theta * d
        xB[p] = theta
        basis[p] = q
        piv = d[p]
        row = Binv[p] / piv
        Binv = Binv - np.outer(d, row)
        Binv[p] = row
        since_factor += 1
        if since_factor >= refactor_every:
            Binv = factor()
            xB = Binv @ b
            since_factor = 0
        xB = np.where(basis >= 0, np.maximum(xB, 0.0), 0.0)

        if theta <= tol:
            degenerate_run += 1
            if degenerate_run >= degenerate_switch:
                bland = True
        else:
            degenerate_run = 0
            bland = False
        it += 1

    x = np.zeros(n)
    real = basis >= 0
    x[basis[real]] = xB[real]
    cB = np.array([c[j] if j >= 0 else 0.0 for j in basis])
    y = cB @ Binv
    r = c - y @ A
    sol = LPSolution(
        x=x, value=float(c @ x), duals=y, reduced_costs=r, iterations=it, bland_pivots=bland_pivots,
        basis=basis.copy(), residual=float(np.max(np.abs(A @ x - b))),
        dual_infeasibility=float(max(0.0, -r.min())), slackness=float(np.max(np.abs(x * r))), rhs=b,
    )
    logger.debug("simplex: %d pivots (%d Bland), value %.6g", it, bland_pivots, sol.value)
    return sol
