"""Lagrangians L(x, u), their Legendre transforms and the Hamiltonian
H(x, p) = L*(x, F(x)^T p).

Two kinds are supported.  ``mane`` is L = |u - V(x)|^2 / 2 + G(x) with the
closed-form transform L*(x, q) = |q|^2 / 2 + <q, V(x)> - G(x).  ``custom`` is
a table of L on (state grid) x (control box lattice), interpolated
multilinearly; its transform is a lattice maximisation with one local
refinement pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernels import periodic_stencil
from .sr_structure import ControlGrid, FieldSystem, TorusGrid


class CoercivityError(ValueError):
    """A coercivity or convexity certificate failed verification."""


# ---------------------------------------------------------------------------
# built-in potentials


def _sin2(x):
    return np.sum(np.sin(np.pi * x) ** 2, axis=-1)


def _two_bump(x):
    # zero minimum at the origin, local minimum 0.3 at (1/2, ..., 1/2)
    d = x.shape[-1]
    return _sin2(x) * (0.3 / d + _sin2(x - 0.5))


BUILTIN_POTENTIALS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": lambda x: np.zeros(x.shape[:-1]),
    "sin2": _sin2,
    "two-bump": _two_bump,
}


def potential_by_name(name: str, offset: float = 0.0) -> Callable:
    try:
        base = BUILTIN_POTENTIALS[name]
    except KeyError:
        raise ValueError(f"unknown potential {name!r}; built-ins: {sorted(BUILTIN_POTENTIALS)}") from None
    if offset == 0.0:
        return base
    return lambda x: base(x) + offset


def constant_potential(value: float) -> Callable:
    return lambda x: np.full(np.asarray(x).shape[:-1], float(value))


def constant_drift(v) -> Callable:
    v = np.asarray(v, dtype=float)
    return lambda x: np.broadcast_to(v, np.asarray(x).shape[:-1] + v.shape).copy()


def zero_drift(m: int) -> Callable:
    return constant_drift(np.zeros(m))


def tabulated_function(table: np.ndarray) -> Callable:
    """Periodic multilinear interpolant of node values of shape (n,)*d (+ (k,))."""
    table = np.asarray(table, dtype=float)

    def fn(x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        n = table.shape[0]
        flat = table.reshape((n**d, -1))
        idx, w = periodic_stencil(n, d, x.reshape(-1, d))
        acc = w[:, 0, None] * flat[idx[:, 0]]
        for c in range(1, idx.shape[1]):
            acc = acc + w[:, c, None] * flat[idx[:, c]]
        tail = table.shape[d:]
        return acc.reshape(x.shape[:-1] + tail)

    return fn


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CustomTable:
    """L tabulated on (n,)*d state nodes times a box lattice [-R, R]^m with
    n_u nodes per axis.  ``values`` has shape (n**d, n_u**m)."""

    d: int
    m: int
    n: int
    n_u: int
    radius: float
    values: np.ndarray = field(repr=False)

    def eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        u = np.asarray(u, dtype=float).reshape(-1, self.m)
        if np.any(np.abs(u) > self.radius * (1 + 1e-12)):
            raise ValueError(f"control outside tabulated range [-{self.radius}, {self.radius}]^{self.m}")
        ix, wx = periodic_stencil(self.n, self.d, x)
        s = (u + self.radius) / (2 * self.radius) * (self.n_u - 1)
        base = np.clip(np.floor(s), 0, self.n_u - 2).astype(np.int64)
        frac = s - base
        out = np.zeros(len(x))
        for cu in range(2**self.m):
            bits = [(cu >> (self.m - 1 - a)) & 1 for a in range(self.m)]
            iu = np.zeros(len(u), dtype=np.int64)
            wu = np.ones(len(u))
            for a, b in enumerate(bits):
                iu = iu * self.n_u + base[:, a] + b
                wu = wu * (frac[:, a] if b else 1.0 - frac[:, a])
            for cx in range(ix.shape[1]):
                out = out + wx[:, cx] * wu * self.values[ix[:, cx], iu]
        return out

    def control_nodes(self) -> np.ndarray:
        ax = np.linspace(-self.radius, self.radius, self.n_u)
        return np.stack(np.meshgrid(*([ax] * self.m), indexing="ij"), -1).reshape(-1, self.m)


def load_custom_table(path) -> CustomTable:
    """Text table: first non-comment line ``d m n n_u radius``, then one line
    per state node (row-major) holding n_u**m control values (row-major)."""
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    d, m, n, n_u = (int(v) for v in lines[0].split()[:4])
    radius = float(lines[0].split()[4])
    values = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if values.shape != (n**d, n_u**m):
        raise ValueError(f"{path}: expected table of shape {(n**d, n_u**m)}, got {values.shape}")
    return CustomTable(d, m, n, n_u, radius, values)


@dataclass(frozen=True)
class LagrangianSpec:
    kind: str
    d: int
    m: int
    sigma: float
    K1: float
    K2: float
    L0_sup: float
    V: Callable | None = field(default=None, repr=False, compare=False)
    G: Callable | None = field(default=None, repr=False, compare=False)
    table: CustomTable | None = field(default=None, repr=False, compare=False)
    shift: float = 0.0
    names: dict = field(default_factory=dict, compare=False)
    sample_grid: TorusGrid | None = field(default=None, compare=False)
    assumption_S: str = "unchecked"

    # -- constructors -------------------------------------------------------

    @classmethod
    def mane(cls, V: Callable, G: Callable, grid: TorusGrid, m: int | None = None,
             shift: float = 0.0, names: dict | None = None) -> "LagrangianSpec":
        """Mane Lagrangian with computed certificate sigma=2, K1=1/4,
        K2 = sup(|V|^2/2 + max(-G, 0))."""
        X = grid.nodes()
        Vx = np.asarray(V(X), dtype=float)
        m = Vx.shape[-1] if m is None else m
        Gx = np.asarray(G(X), dtype=float) + shift
        half_v2 = 0.5 * np.sum(Vx**2, axis=-1)
        K2 = float(np.max(half_v2 + np.maximum(-Gx, 0.0)))
        L0 = float(np.max(np.abs(half_v2 + Gx)))
        spec = cls("mane", grid.d, m, 2.0, 0.25, K2, L0, V=V, G=G, shift=shift, names=dict(names or {}), sample_grid=grid)
        spec.verify(grid)
        return spec

    @classmethod
    def custom(cls, table: CustomTable, sigma: float, K1: float, K2: float,
               names: dict | None = None) -> "LagrangianSpec":
        grid = TorusGrid(table.d, table.n)
        L0 = float(np.max(np.abs(table.eval(grid.nodes(), np.zeros((grid.size, table.m))))))
        spec = cls("custom", table.d, table.m, float(sigma), float(K1), float(K2), L0,
                   table=table, names=dict(names or {}), sample_grid=grid)
        spec.verify(grid)
        return spec

    def shifted(self, a: float) -> "LagrangianSpec":
        """Same Lagrangian plus the constant a (certificate recomputed)."""
        if self.kind == "mane":
            return LagrangianSpec.mane(self.V, self.G, self.sample_grid, self.m,
                                       shift=self.shift + a, names=self.names)
        return LagrangianSpec("custom", self.d, self.m, self.sigma, self.K1, self.K2 + max(-a, 0.0),
                              self.L0_sup + abs(a), table=self.table, shift=self.shift + a,
                              names=dict(self.names), sample_grid=self.sample_grid)

    # -- evaluation ---------------------------------------------------------

    def eval(self, x, u) -> np.ndarray:
        """L(x, u) with broadcasting over leading dimensions."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1] != self.d or u.shape[-1] != self.m:
            raise ValueError(f"dimension mismatch: x {x.shape}, u {u.shape} for (d, m) = ({self.d}, {self.m})")
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        if self.kind == "mane":
            Vx = np.asarray(self.V(x), dtype=float)
            Gx = np.asarray(self.G(x), dtype=float)
            acc = (u[..., 0] - Vx[..., 0]) ** 2
            for j in range(1, self.m):
                acc = acc + (u[..., j] - Vx[..., j]) ** 2
            return np.broadcast_to(0.5 * acc + Gx + self.shift, lead).copy()
        xb = np.broadcast_to(x, lead + (self.d,)).reshape(-1, self.d)
        ub = np.broadcast_to(u, lead + (self.m,)).reshape(-1, self.m)
        return (self.table.eval(xb, ub) + self.shift).reshape(lead)

    def cost_table(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """L at every (node, control) pair, shape (len(X), len(U))."""
        return self.eval(X[:, None, :], U[None, :, :])

    def legendre(self, x, q, ctrl: ControlGrid | None = None) -> np.ndarray:
        """L*(x, q) = sup_u <q, u> - L(x, u)."""
        return self._legendre(x, q, ctrl)[0]

    def legendre_argmax(self, x, q, ctrl: ControlGrid | None = None) -> np.ndarray:
        """D_q L*(x, q), the maximising control."""
        return self._legendre(x, q, ctrl)[1]

    def legendre_pair(self, x, q, ctrl: ControlGrid | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(L*(x, q), D_q L*(x, q)) in one pass."""
        return self._legendre(x, q, ctrl)

    def _legendre(self, x, q, ctrl):
        x = np.asarray(x, dtype=float)
        q = np.asarray(q, dtype=float)
        if x.shape[-1] != self.d or q.shape[-1] != self.m:
            raise ValueError(f"dimension mismatch: x {x.shape}, q {q.shape}")
        if self.kind == "mane":
            Vx = np.asarray(self.V(x), dtype=float)
            Gx = np.asarray(self.G(x), dtype=float)
            val = 0.5 * np.sum(q**2, axis=-1) + np.sum(q * Vx, axis=-1) - Gx - self.shift
            return val, q + Vx
        return self._legendre_numeric(x, q, ctrl)

    def _legendre_numeric(self, x, q, ctrl):
        lead = np.broadcast_shapes(x.shape[:-1], q.shape[:-1])
        xs = np.broadcast_to(x, lead + (self.d,)).reshape(-1, self.d)
        qs = np.broadcast_to(q, lead + (self.m,)).reshape(-1, self.m)
        R = self.table.radius
        U = (ctrl or ControlGrid(self.m, R, 2 * self.table.n_u - 1)).points
        U = U[np.all(np.abs(U) <= R, axis=1)]
        vals = np.empty(len(xs))
        best_u = np.empty((len(xs), self.m))
        for i, (xi, qi) in enumerate(zip(xs, qs)):
            obj = U @ qi - self.eval(xi[None, :], U)
            k = int(np.argmax(obj))
            # one local refinement pass on a finer box around the lattice argmax
            h = (U[1] - U[0]).max() if len(U) > 1 else R
            ax = np.linspace(-h, h, 11)
            local = U[k] + np.stack(np.meshgrid(*([ax] * self.m), indexing="ij"), -1).reshape(-1, self.m)
            local = np.clip(local, -R, R)
            lobj = local @ qi - self.eval(xi[None, :], local)
            j = int(np.argmax(lobj))
            if lobj[j] > obj[k]:
                vals[i], best_u[i] = lobj[j], local[j]
            else:
                vals[i], best_u[i] = obj[k], U[k]
        return vals.reshape(lead), best_u.reshape(lead + (self.m,))

    def hamiltonian(self, sys: FieldSystem, x, p, ctrl: ControlGrid | None = None) -> np.ndarray:
        """H(x, p) = L*(x, F(x)^T p)."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.d:
            raise ValueError(f"covector dimension {p.shape[-1]} != {self.d}")
        F = sys.eval(x)
        q = np.einsum("...ij,...i->...j", F, p)
        return self.legendre(x, q, ctrl)

    def feedback(self, sys: FieldSystem, x, p, ctrl: ControlGrid | None = None) -> np.ndarray:
        """D_q L*(x, F(x)^T p): the control realising H(x, p)."""
        F = sys.eval(np.asarray(x, dtype=float))
        q = np.einsum("...ij,...i->...j", F, np.asarray(p, dtype=float))
        return self.legendre_argmax(x, q, ctrl)

    def du(self, x, u, eps: float = 1e-5) -> np.ndarray:
        """D_u L: analytic for mane, central differences for custom."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.kind == "mane":
            return u - np.asarray(self.V(x), dtype=float)
        out = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (self.m,))
        for j in range(self.m):
            e = np.zeros(self.m)
            e[j] = eps
            out[..., j] = (self.eval(x, u + e) - self.eval(x, u - e)) / (2 * eps)
        return out

    # -- certificates -------------------------------------------------------

    def verify(self, grid: TorusGrid, n_controls: int = 9, radius: float | None = None) -> None:
        """Sample L >= K1 |u|^sigma - K2 and midpoint convexity in u."""
        if self.sigma <= 1:
            raise CoercivityError(f"sigma must exceed 1, got {self.sigma}")
        if self.K1 <= 0:
            raise CoercivityError(f"K1 must be positive, got {self.K1}")
        X = grid.nodes()
        if self.kind == "custom":
            U = self.table.control_nodes()
        else:
            R = radius if radius is not None else 2.0 + 2.0 * np.sqrt(self.K2 + self.L0_sup)
            U = ControlGrid(self.m, R, n_controls).points
        Ltab = self.cost_table(X, U)
        lower = self.K1 * np.sum(U**2, axis=1) ** (self.sigma / 2) - self.K2
        worst = float(np.min(Ltab - lower[None, :]))
        if worst < -1e-9:
            raise CoercivityError(f"L >= K1|u|^sigma - K2 violated by {-worst:.3g}")
        rng = np.random.default_rng(0)
        i = rng.integers(0, len(U), size=(200, 2))
        k = rng.integers(0, len(X), size=200)
        mid = 0.5 * (U[i[:, 0]] + U[i[:, 1]])
        lhs = self.eval(X[k], mid)
        rhs = 0.5 * (self.eval(X[k], U[i[:, 0]]) + self.eval(X[k], U[i[:, 1]]))
        if np.any(lhs > rhs + 1e-12):
            raise CoercivityError("sampled midpoint convexity in u fails")


def control_radius_bound(spec: LagrangianSpec, safety: float = 2.0, min_radius: float = 1.0) -> float:
    """safety * kappa0^(1/sigma) with kappa0 = (sup|L(., 0)| + K2) / K1,
    clamped below by ``min_radius``."""
    if spec.K1 <= 0:
        raise ValueError("K1 must be positive")
    kappa0 = (spec.L0_sup + spec.K2) / spec.K1
    return max(safety * kappa0 ** (1.0 / spec.sigma), min_radius)


def moment_cap(spec: LagrangianSpec) -> float:
    return (spec.L0_sup + spec.K2) / spec.K1


def hamiltonian_lipschitz_constant(spec: LagrangianSpec, sys: FieldSystem, P: float = 2.0,
                                   n_samples: int = 2000, seed: int = 0) -> float:
    """Empirical C_H with |H(x,p) - H(y,p)| <= C_H (1 + |p|^2) |x - y|."""
    rng = np.random.default_rng(seed)
    x = rng.random((n_samples, spec.d))
    y = x + rng.normal(scale=0.01, size=x.shape)
    p = rng.normal(size=(n_samples, spec.d))
    p *= (P * rng.random(n_samples) / np.maximum(np.linalg.norm(p, axis=1), 1e-12))[:, None]
    dist = np.linalg.norm(y - x, axis=1)
    dh = np.abs(spec.hamiltonian(sys, x, p) - spec.hamiltonian(sys, y, p))
    return float(np.max(dh / ((1 + np.sum(p**2, axis=1)) * np.maximum(dist, 1e-15))))
