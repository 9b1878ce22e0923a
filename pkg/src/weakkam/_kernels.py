"""Low-level numerical kernels shared by the dynamic-programming modules.

Everything here works on flat row-major node arrays.  The compiled kernels
write disjoint output rows per parallel iteration and reduce in a fixed
order, so results do not depend on the number of threads.
"""

from __future__ import annotations

import itertools
import os

# prefer OpenMP, then the builtin workqueue; TBB last (old TBB builds warn)
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

import numba as nb  # noqa: E402
import numpy as np  # noqa: E402

_SNAP = 1e-9


def corner_offsets(d: int) -> np.ndarray:
    """All 2^d corner offsets of a unit cell, in lexicographic order."""
    return np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)


def periodic_stencil(n: int, d: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat corner indices and multilinear weights for points on the unit torus.

    Points within 1e-9 cells of a node are snapped onto it so that
    interpolation is exact at nodes.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, d)
    s = np.mod(pts, 1.0) * n
    r = np.rint(s)
    s = np.where(np.abs(s - r) < _SNAP, r, s)
    base = np.floor(s)
    frac = s - base
    base = base.astype(np.int64) % n

    offs = corner_offsets(d)
    C = len(offs)
    idx = np.zeros((len(pts), C), dtype=np.int64)
    w = np.ones((len(pts), C))
    for c, off in enumerate(offs):
        for a in range(d):
            idx[:, c] = idx[:, c] * n + (base[:, a] + off[a]) % n
            w[:, c] *= frac[:, a] if off[a] else 1.0 - frac[:, a]
    return idx, w


def gather(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted corner sum, accumulated corner by corner in a fixed order."""
    acc = w[..., 0] * values[idx[..., 0]]
    for c in range(1, idx.shape[-1]):
        acc = acc + w[..., c] * values[idx[..., c]]
    return acc


def displacement(frames: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """F(x) u with an explicit, order-fixed sum over control components."""
    out = frames[..., :, 0] * controls[..., None, 0]
    for j in range(1, frames.shape[-1]):
        out = out + frames[..., :, j] * controls[..., None, j]
    return out


@nb.njit(parallel=True, cache=True)
def sl_min_multi(values, idx, w, cost, out):  # pragma: no cover - compiled
    """out[y, s] = min_k (sum_c w[y,k,c] values[idx[y,k,c], s] + cost[y,k])."""
    N, K, C = idx.shape
    S = values.shape[1]
    for y in nb.prange(N):
        best = np.full(S, np.inf)
        acc = np.empty(S)
        for k in range(K):
            i0 = idx[y, k, 0]
            w0 = w[y, k, 0]
            for s in range(S):
                acc[s] = w0 * values[i0, s]
            for c in range(1, C):
                ic = idx[y, k, c]
                wc = w[y, k, c]
                if wc == 0.0:
                    continue
                for s in range(S):
                    acc[s] = acc[s] + wc * values[ic, s]
            ck = cost[y, k]
            for s in range(S):
                v = acc[s] + ck
                if v < best[s]:
                    best[s] = v
        for s in range(S):
            out[y, s] = best[s]


@nb.njit(parallel=True, cache=True)
def minplus_product(A, B, out):  # pragma: no cover - compiled
    """(min, +) matrix product out = A (x) B."""
    n, m = A.shape
    p = B.shape[1]
    for i in nb.prange(n):
        row = np.full(p, np.inf)
        for k in range(m):
            a = A[i, k]
            if a == np.inf:
                continue
            for j in range(p):
                v = a + B[k, j]
                if v < row[j]:
                    row[j] = v
        for j in range(p):
            out[i, j] = row[j]


def minplus(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"min-plus shape mismatch {A.shape} x {B.shape}")
    out = np.empty((A.shape[0], B.shape[1]))
    minplus_product(A, B, out)
    return out
