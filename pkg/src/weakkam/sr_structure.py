"""Torus geometry, control lattices, control-affine frames and the
sub-Riemannian minimal-time distance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernels import displacement, gather, periodic_stencil

logger = logging.getLogger(__name__)


class UnreachableError(RuntimeError):
    """Minimal-time iteration left nodes unreached at this resolution."""

    def __init__(self, message: str, nodes: np.ndarray):
        super().__init__(message)
        self.nodes = nodes


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with n nodes per axis on the unit torus of dimension d."""

    d: int
    n: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if self.n < 2:
            raise ValueError(f"need at least 2 nodes per axis, got {self.n}")
        if (1.0 / self.n) * self.n != 1.0:
            raise ValueError(f"n={self.n}: spacing 1/n does not satisfy h*n == 1 in floating point")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape (n^d, d), row-major (last axis fastest)."""
        axes = np.meshgrid(*([np.arange(self.n) * self.h] * self.d), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    def multi_index(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def flat_index(self, multi) -> np.ndarray:
        multi = np.mod(np.asarray(multi, dtype=np.int64), self.n)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.shape)

    def nearest_node(self, x) -> int:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise ValueError(f"point of dimension {x.shape} on a {self.d}-torus")
        return int(self.flat_index(np.rint(np.mod(x, 1.0) * self.n).astype(np.int64)))

    def cell_distance(self, a, b) -> np.ndarray:
        """Chebyshev distance in cells between flat node indices, with wrap."""
        da = np.abs(self.multi_index(a) - self.multi_index(b))
        return np.minimum(da, self.n - da).max(axis=-1)


def torus_difference(x, y) -> np.ndarray:
    """Shortest representative of y - x on the unit torus, componentwise."""
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    return diff - np.rint(diff)


@dataclass(frozen=True)
class ControlGrid:
    """Lattice of spacing 2R/(n_u - 1) inside the closed ball of radius R.

    The lattice is generated as integer multiples of the spacing, so zero is
    always a member and the set is exactly symmetric under negation.
    """

    m: int
    radius: float
    n_u: int
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("control radius must be nonnegative")
        if self.n_u < 2:
            raise ValueError("need at least 2 control nodes per axis")
        if self.radius == 0:
            pts = np.zeros((1, self.m))
        else:
            step = 2.0 * self.radius / (self.n_u - 1)
            jmax = int(np.floor(self.radius / step + 1e-12))
            js = np.arange(-jmax, jmax + 1)
            lattice = np.stack(np.meshgrid(*([js] * self.m), indexing="ij"), -1).reshape(-1, self.m)
            pts = lattice * step
            keep = np.sqrt((pts**2).sum(1)) <= self.radius * (1 + 1e-12)
            pts = pts[keep]
        object.__setattr__(self, "points", pts)

    @property
    def spacing(self) -> float:
        return 2.0 * self.radius / (self.n_u - 1)

    def __len__(self):
        return len(self.points)

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(np.all(self.points == 0.0, axis=1))[0])


@dataclass(frozen=True)
class ScalarField:
    """Grid function on the torus; ``values`` has shape ``grid.shape``."""

    grid: TorusGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        object.__setattr__(self, "values", vals)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def from_function(cls, grid: TorusGrid, fn: Callable, **meta) -> "ScalarField":
        return cls(grid, np.asarray(fn(grid.nodes()), dtype=float), dict(meta))

    @classmethod
    def constant(cls, grid: TorusGrid, value: float, **meta) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)), dict(meta))

    def with_values(self, values, **meta) -> "ScalarField":
        return ScalarField(self.grid, values, {**self.meta, **meta})

    def sup_distance(self, other: "ScalarField") -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def resample(self, grid: "TorusGrid") -> "ScalarField":
        """Multilinear interpolant evaluated at the nodes of another grid."""
        if grid.d != self.grid.d:
            raise ValueError("dimension mismatch")
        return ScalarField(grid, interpolate_values(self.values, grid.nodes()), dict(self.meta))


def interpolate_values(values: np.ndarray, x) -> np.ndarray:
    """Periodic multilinear interpolation of a raw (n,)*d array at points x."""
    values = np.asarray(values, dtype=float)
    d, n = values.ndim, values.shape[0]
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, d)
    idx, w = periodic_stencil(n, d, pts)
    out = gather(values.reshape(-1), idx, w)
    return out[0] if single else out


def interpolate(field: ScalarField, x):
    """Interpolate a ScalarField at one point (scalar result) or many (M, d)."""
    pts = np.asarray(x, dtype=float)
    if pts.shape[-1] != field.grid.d:
        raise ValueError(f"point dimension {pts.shape[-1]} != grid dimension {field.grid.d}")
    out = interpolate_values(field.values, pts)
    return float(out) if pts.ndim == 1 else out


# ---------------------------------------------------------------------------
# frames


def _grushin_chart(x: np.ndarray) -> np.ndarray:
    r = np.mod(x[:, 0] + 0.5, 1.0) - 0.5
    F = np.zeros((len(x), 2, 2))
    F[:, 0, 0] = 1.0
    F[:, 1, 1] = r
    return F


def _grushin_periodic(x: np.ndarray) -> np.ndarray:
    F = np.zeros((len(x), 2, 2))
    F[:, 0, 0] = 1.0
    F[:, 1, 1] = np.sin(2 * np.pi * x[:, 0]) / (2 * np.pi)
    return F


@dataclass(frozen=True)
class FieldSystem:
    """Control-affine frame x -> F(x) = [f_1 | ... | f_m] on the d-torus."""

    name: str
    d: int
    m: int
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    smoothness_note: str = ""
    full_rank_everywhere: bool = True

    def eval(self, x) -> np.ndarray:
        """F at one point (d, m) or a batch (M, d, m); x is reduced mod 1."""
        pts = np.asarray(x, dtype=float)
        if pts.shape[-1] != self.d:
            raise ValueError(f"{self.name}: point dimension {pts.shape[-1]} != {self.d}")
        single = pts.ndim == 1
        F = self.fn(np.mod(pts.reshape(-1, self.d), 1.0))
        return F[0] if single else F.reshape(pts.shape[:-1] + (self.d, self.m))

    def max_norm(self, grid: TorusGrid) -> float:
        """Largest spectral norm of F over the grid nodes."""
        F = self.eval(grid.nodes())
        return float(np.max(np.linalg.norm(F, ord=2, axis=(1, 2))))

    def periodicity_defect(self, n_samples: int = 64, seed: int = 0) -> float:
        """max |F(x) - F(x + e_k)| over random samples and unit translations.

        Frames are evaluated on x mod 1, so a frame is periodic by
        construction; this measures the representative reduction only.
        """
        rng = np.random.default_rng(seed)
        x = rng.random((n_samples, self.d))
        base = self.fn(x)
        worst = 0.0
        for k in range(self.d):
            shifted = x.copy()
            shifted[:, k] += 1.0
            worst = max(worst, float(np.max(np.abs(self.eval(shifted) - base))))
        return worst


def riemannian_identity(d: int = 2) -> FieldSystem:
    def fn(x):
        return np.broadcast_to(np.eye(d), (len(x), d, d)).copy()

    return FieldSystem("riemannian-identity", d, d, fn, "constant frame", True)


def grushin_chart() -> FieldSystem:
    return FieldSystem(
        "grushin-chart", 2, 2, _grushin_chart,
        "F22 = representative of x1 in [-1/2, 1/2); discontinuous at x1 = 1/2", False,
    )


def grushin_periodic() -> FieldSystem:
    return FieldSystem(
        "grushin-periodic", 2, 2, _grushin_periodic,
        "F22 = sin(2 pi x1) / (2 pi); smooth, rank 1 on x1 in {0, 1/2}", False,
    )


BUILTIN_FRAMES = {
    "riemannian-identity": riemannian_identity,
    "grushin-chart": grushin_chart,
    "grushin-periodic": grushin_periodic,
}


def frame_by_name(name: str, d: int = 2) -> FieldSystem:
    if name == "riemannian-identity":
        return riemannian_identity(d)
    try:
        return BUILTIN_FRAMES[name]()
    except KeyError:
        raise ValueError(f"unknown frame {name!r}; built-ins: {sorted(BUILTIN_FRAMES)}") from None


def tabulated_frame(path, d: int, m: int, name: str | None = None) -> FieldSystem:
    """Frame read from a text table: one line per node (row-major), d*m values
    per line (F row-major).  Between nodes the entries are interpolated
    multilinearly."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] != d * m:
        raise ValueError(f"{path}: expected {d * m} values per line, got {data.shape[1]}")
    n = round(len(data) ** (1.0 / d))
    if n**d != len(data):
        raise ValueError(f"{path}: {len(data)} lines is not a perfect {d}-th power")
    table = data.reshape((n,) * d + (d * m,))

    def fn(x):
        idx, w = periodic_stencil(n, d, x)
        flat = table.reshape(-1, d * m)
        acc = w[:, 0, None] * flat[idx[:, 0]]
        for c in range(1, idx.shape[1]):
            acc = acc + w[:, c, None] * flat[idx[:, c]]
        return acc.reshape(-1, d, m)

    full = bool(np.all(np.linalg.matrix_rank(table.reshape(-1, d, m)) == min(d, m)))
    return FieldSystem(name or f"table:{path}", d, m, fn, "multilinear interpolation of tabulated nodes", full)


def frame_rank(sys: FieldSystem, x, tol: float = 1e-12) -> np.ndarray:
    return np.linalg.matrix_rank(sys.eval(x), tol=tol)


# ---------------------------------------------------------------------------
# sub-Riemannian distance


def sr_distance(
    sys: FieldSystem,
    grid: TorusGrid,
    x,
    tol: float = 1e-6,
    n_u: int = 11,
    max_sweeps: int = 20000,
    big: float = 100.0,
) -> ScalarField:
    """Minimal time y -> d_SR(x, y) with controls |u|_2 <= 1.

    Synchronous value iteration D(y) = min_u D(y - tau F(y) u) + tau with
    tau = h / max|F| and the source node pinned at zero.  Nodes are
    initialised at ``big`` and capped there; nodes still at the cap after
    convergence are reported as unreachable.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    src = grid.nearest_node(x)
    ctrl = ControlGrid(sys.m, 1.0, n_u)
    X = grid.nodes()
    F = sys.eval(X)
    tau = grid.h / max(sys.max_norm(grid), 1e-12)
    feet = X[:, None, :] - tau * displacement(F[:, None], ctrl.points[None])
    idx, w = periodic_stencil(grid.n, grid.d, feet.reshape(-1, grid.d))
    idx = idx.reshape(grid.size, len(ctrl), -1)
    w = w.reshape(grid.size, len(ctrl), -1)

    D = np.full(grid.size, big)
    D[src] = 0.0
    for sweep in range(1, max_sweeps + 1):
        new = np.minimum(gather(D, idx, w).min(axis=1) + tau, big)
        new[src] = 0.0
        delta = float(np.max(np.abs(new - D)))
        D = new
        if delta < tol:
            break
    else:
        raise UnreachableError(
            f"sr_distance did not converge in {max_sweeps} sweeps (last update {delta:.3g})",
            np.flatnonzero(D >= big),
        )
    unreached = np.flatnonzero(D >= big)
    if len(unreached):
        raise UnreachableError(f"{len(unreached)} nodes unreachable at n={grid.n}", unreached)
    return ScalarField(
        grid, D,
        {"provenance": "sr_distance", "source": src, "sweeps": sweep, "control_ball": "euclidean |u|_2 <= 1"},
    )
