"""Min-max and least-squares cluster hierarchies over a normal map.

Both hierarchies are perfectly balanced quadtrees stored as mip pyramids:
level ``l`` is an array indexed ``[J, I]`` whose node covers leaf cells
``[I * 2**l, (I + 1) * 2**l) x [J * 2**l, (J + 1) * 2**l)``. A cluster node
replaces its ``2**l x 2**l`` cells by a single cell with corner normals
``n0..n3`` (same corner order and triangulation as the leaves); the corners
minimize the inverse-Jacobian-weighted L2 distance to the leaf surface.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .kernels import FootprintQuery, support_cells
from .normal_field import NormalField, NormalTriangle, cell_jacobians, cross2
from .trigeom import eqtri_circumradius

DEFAULT_EPSILON = 1e-6
DEFAULT_TAU = 1e-3

CACHE_MAGIC = b"PNMH1"
CACHE_VERSION = 1

_ROW_CHUNK_ENTRIES = 1 << 18


# --------------------------------------------------------------------------
# Closed-form per-leaf-triangle terms of the gradient A v + B.
#
# a = 2**l; (i, j) is the leaf cell inside the cluster (cluster-local). Each
# function returns A (..., 4, 4) and coefficients Bc (..., 4, 3) such that
# B = Bc @ (three leaf vertex normals). Upper leaves use (n0, n1, n2), lower
# leaves use (n1, n2, n3).
# --------------------------------------------------------------------------

def _upper_in_upper(a, i, j):
    a2 = a * a
    A = np.zeros(np.broadcast(i, j).shape + (4, 4))
    A[..., 0, 0] = (6 * a2 - 4 * a * (3 * i + 3 * j + 2) + 6 * i**2 + 12 * i * j
                    + 8 * i + 6 * j**2 + 8 * j + 3) / (6 * a2)
    A[..., 0, 1] = A[..., 1, 0] = (a * (3 * i + 1) / 3 - i**2 - i * j - i - j / 3 - 0.25) / a2
    A[..., 0, 2] = A[..., 2, 0] = (a * (3 * j + 1) / 3 - i * j - i / 3 - j**2 - j - 0.25) / a2
    A[..., 1, 1] = (6 * i**2 + 4 * i + 1) / (6 * a2)
    A[..., 1, 2] = A[..., 2, 1] = (i * j + i / 3 + j / 3 + 1 / 12) / a2
    A[..., 2, 2] = (6 * j**2 + 4 * j + 1) / (6 * a2)
    Bc = np.zeros(A.shape[:-2] + (4, 3))
    s = -4 * a + 4 * i + 4 * j + 3
    Bc[..., 0, 0] = 2 * (-2 * a + 2 * i + 2 * j + 1)
    Bc[..., 0, 1] = s
    Bc[..., 0, 2] = s
    Bc[..., 1, 0] = -(4 * i + 1)
    Bc[..., 1, 1] = -2 * (2 * i + 1)
    Bc[..., 1, 2] = -(4 * i + 1)
    Bc[..., 2, 0] = -(4 * j + 1)
    Bc[..., 2, 1] = -(4 * j + 1)
    Bc[..., 2, 2] = -2 * (2 * j + 1)
    return A, Bc / (12 * a)


def _upper_in_lower(a, i, j):
    a2 = a * a
    A = np.zeros(np.broadcast(i, j).shape + (4, 4))
    A[..., 1, 1] = (6 * a2 - 12 * a * j - 4 * a + 6 * j**2 + 4 * j + 1) / (6 * a2)
    A[..., 1, 2] = A[..., 2, 1] = (a2 - a * (3 * i + 3 * j + 2) / 3 + i * j + i / 3
                                   + j / 3 + 1 / 12) / a2
    A[..., 2, 2] = (6 * a2 - 12 * a * i - 4 * a + 6 * i**2 + 4 * i + 1) / (6 * a2)
    A[..., 1, 3] = A[..., 3, 1] = (-a2 + a * (i + 2 * j + 1) - i * j - i / 3 - j**2
                                   - j - 0.25) / a2
    A[..., 2, 3] = A[..., 3, 2] = (-a2 + a * (2 * i + j + 1) - i**2 - i * j - i
                                   - j / 3 - 0.25) / a2
    A[..., 3, 3] = (6 * a2 - 4 * a * (3 * i + 3 * j + 2) + 6 * i**2 + 12 * i * j
                    + 8 * i + 6 * j**2 + 8 * j + 3) / (6 * a2)
    Bc = np.zeros(A.shape[:-2] + (4, 3))
    s = -4 * a + 4 * i + 4 * j + 3
    Bc[..., 1, 0] = -4 * a + 4 * j + 1
    Bc[..., 1, 1] = -4 * a + 4 * j + 1
    Bc[..., 1, 2] = 2 * (-2 * a + 2 * j + 1)
    Bc[..., 2, 0] = -4 * a + 4 * i + 1
    Bc[..., 2, 1] = 2 * (-2 * a + 2 * i + 1)
    Bc[..., 2, 2] = -4 * a + 4 * i + 1
    Bc[..., 3, 0] = -2 * (-2 * a + 2 * i + 2 * j + 1)
    Bc[..., 3, 1] = -s
    Bc[..., 3, 2] = -s
    return A, Bc / (12 * a)


def _lower_in_upper(a, i, j):
    a2 = a * a
    A = np.zeros(np.broadcast(i, j).shape + (4, 4))
    A[..., 0, 0] = (6 * a2 - 4 * a * (3 * i + 3 * j + 4) + 6 * i**2 + 12 * i * j
                    + 16 * i + 6 * j**2 + 16 * j + 11) / (6 * a2)
    A[..., 0, 1] = A[..., 1, 0] = (a * (3 * i + 2) / 3 - i**2 - i * j - 2 * i
                                   - 2 * j / 3 - 11 / 12) / a2
    A[..., 0, 2] = A[..., 2, 0] = (a * (3 * j + 2) / 3 - i * j - 2 * i / 3 - j**2
                                   - 2 * j - 11 / 12) / a2
    A[..., 1, 1] = (6 * i**2 + 8 * i + 3) / (6 * a2)
    A[..., 1, 2] = A[..., 2, 1] = (12 * i * j + 8 * i + 8 * j + 5) / (12 * a2)
    A[..., 2, 2] = (6 * j**2 + 8 * j + 3) / (6 * a2)
    Bc = np.zeros(A.shape[:-2] + (4, 3))
    s = -4 * a + 4 * i + 4 * j + 5
    Bc[..., 0, 0] = s
    Bc[..., 0, 1] = s
    Bc[..., 0, 2] = 2 * (-2 * a + 2 * i + 2 * j + 3)
    Bc[..., 1, 0] = -(4 * i + 3)
    Bc[..., 1, 1] = -2 * (2 * i + 1)
    Bc[..., 1, 2] = -(4 * i + 3)
    Bc[..., 2, 0] = -2 * (2 * j + 1)
    Bc[..., 2, 1] = -(4 * j + 3)
    Bc[..., 2, 2] = -(4 * j + 3)
    return A, Bc / (12 * a)


def _lower_in_lower(a, i, j):
    a2 = a * a
    A = np.zeros(np.broadcast(i, j).shape + (4, 4))
    A[..., 1, 1] = (6 * a2 - 12 * a * j - 8 * a + 6 * j**2 + 8 * j + 3) / (6 * a2)
    A[..., 1, 2] = A[..., 2, 1] = (12 * a2 - 4 * a * (3 * i + 3 * j + 4) + 12 * i * j
                                   + 8 * i + 8 * j + 5) / (12 * a2)
    A[..., 2, 2] = (6 * a2 - 12 * a * i - 8 * a + 6 * i**2 + 8 * i + 3) / (6 * a2)
    A[..., 1, 3] = A[..., 3, 1] = (-a2 + a * (i + 2 * j + 2) - i * j - 2 * i / 3 - j**2
                                   - 2 * j - 11 / 12) / a2
    A[..., 2, 3] = A[..., 3, 2] = (-a2 + a * (2 * i + j + 2) - i**2 - i * j - 2 * i
                                   - 2 * j / 3 - 11 / 12) / a2
    A[..., 3, 3] = (6 * a2 - 4 * a * (3 * i + 3 * j + 4) + 6 * i**2 + 12 * i * j
                    + 16 * i + 6 * j**2 + 16 * j + 11) / (6 * a2)
    Bc = np.zeros(A.shape[:-2] + (4, 3))
    s = -4 * a + 4 * i + 4 * j + 5
    Bc[..., 1, 0] = 2 * (-2 * a + 2 * j + 1)
    Bc[..., 1, 1] = -4 * a + 4 * j + 3
    Bc[..., 1, 2] = -4 * a + 4 * j + 3
    Bc[..., 2, 0] = -4 * a + 4 * i + 3
    Bc[..., 2, 1] = 2 * (-2 * a + 2 * i + 1)
    Bc[..., 2, 2] = -4 * a + 4 * i + 3
    Bc[..., 3, 0] = -s
    Bc[..., 3, 1] = -s
    Bc[..., 3, 2] = -2 * (-2 * a + 2 * i + 2 * j + 3)
    return A, Bc / (12 * a)


def leaf_terms(a: int, i, j):
    """Gradient terms (A_up, Bc_up, A_lo, Bc_lo) for leaf cells (i, j) of a size-a cluster."""
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    a = float(a)
    A_uu, B_uu = _upper_in_upper(a, i, j)
    A_ul, B_ul = _upper_in_lower(a, i, j)
    A_lu, B_lu = _lower_in_upper(a, i, j)
    A_ll, B_ll = _lower_in_lower(a, i, j)
    up = (i + j <= a - 1)[..., None, None]
    lo = (i + j <= a - 2)[..., None, None]
    return (np.where(up, A_uu, A_ul), np.where(up, B_uu, B_ul),
            np.where(lo, A_lu, A_ll), np.where(lo, B_lu, B_ll))


# --------------------------------------------------------------------------
# Assembly
# --------------------------------------------------------------------------

class NormalEquations(NamedTuple):
    """Per-component quadratic: objective(v) = 1/2 v^T A v + tr(B^T v) + C.

    A is 4x4 (shared by both normal components), B is 4x2, C a scalar.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


def leaf_weights(field: NormalField, epsilon: float = DEFAULT_EPSILON, clamp: bool = True):
    """Inverse Jacobian weights of upper and lower leaf triangles, shape (H, W)."""
    j_up, j_lo = cell_jacobians(field)
    if clamp:
        return 1.0 / np.maximum(j_up, epsilon), 1.0 / np.maximum(j_lo, epsilon)
    # raw weights; exactly degenerate triangles still fall back to epsilon
    return (1.0 / np.where(j_up > 0, j_up, epsilon), 1.0 / np.where(j_lo > 0, j_lo, epsilon))


def _blocks(x: np.ndarray, a: int) -> np.ndarray:
    """(H, W, ...) -> (H/a, W/a, a, a, ...) with local index order [j, i]."""
    h, w = x.shape[:2]
    y = x.reshape((h // a, a, w // a, a) + x.shape[2:])
    return np.moveaxis(y, 2, 1)


def _assemble_blocks(a: int, w_up, w_lo, n0, n1, n2, n3) -> NormalEquations:
    """Assemble over blocked leaf data shaped (nodes..., a, a[, 2])."""
    lead = w_up.shape[:-2]
    nodes = int(np.prod(lead)) if lead else 1
    A = np.zeros((nodes, 4, 4))
    B = np.zeros((nodes, 4, 2))
    rows = max(1, _ROW_CHUNK_ENTRIES // a)
    ii = np.arange(a, dtype=np.float64)
    for j0 in range(0, a, rows):
        j1 = min(a, j0 + rows)
        jj = np.arange(j0, j1, dtype=np.float64)
        A_up, Bc_up, A_lo, Bc_lo = leaf_terms(a, ii[None, :], jj[:, None])
        q = (j1 - j0) * a
        wu = w_up[..., j0:j1, :].reshape(nodes, q)
        wl = w_lo[..., j0:j1, :].reshape(nodes, q)
        A += (wu @ A_up.reshape(q, 16) + wl @ A_lo.reshape(q, 16)).reshape(nodes, 4, 4)
        for slot, (nu, nl) in enumerate(((n0, n1), (n1, n2), (n2, n3))):
            xu = (wu[..., None] * nu[..., j0:j1, :, :].reshape(nodes, q, 2))
            xl = (wl[..., None] * nl[..., j0:j1, :, :].reshape(nodes, q, 2))
            B += np.einsum("nqc,qk->nkc", xu, Bc_up[..., slot].reshape(q, 4))
            B += np.einsum("nqc,qk->nkc", xl, Bc_lo[..., slot].reshape(q, 4))
    # constant term: weighted integral of |n|^2 over each leaf triangle (area 1/2)
    def tri_sq(p, q_, r):
        s = p + q_ + r
        return ((p**2).sum(-1) + (q_**2).sum(-1) + (r**2).sum(-1) + (s**2).sum(-1)) / 24.0
    C = (w_up * tri_sq(n0, n1, n2) + w_lo * tri_sq(n3, n2, n1)).reshape(nodes, -1).sum(-1)
    return NormalEquations(A.reshape(lead + (4, 4)), B.reshape(lead + (4, 2)), C.reshape(lead))


def assemble_normal_equations(field: NormalField, level: int, cell, epsilon: float = DEFAULT_EPSILON,
                              clamp: bool = True) -> NormalEquations:
    """Normal equations of the cluster node ``cell = (I, J)`` at ``level >= 1``.

    The gradient of the weighted objective at stacked corner normals ``v``
    (4 x 2) is ``A @ v + B``.
    """
    if level < 1:
        raise ValueError("cluster equations are defined for level >= 1")
    a = 1 << level
    I, J = cell
    ii = np.arange(I * a, (I + 1) * a)
    jj = np.arange(J * a, (J + 1) * a)
    w_up, w_lo = leaf_weights(field, epsilon, clamp)
    n0, n1, n2, n3 = field.corner_grids()
    rows = np.mod(jj, field.height)[:, None]
    cols = np.mod(ii, field.width)[None, :]
    return _assemble_blocks(a, w_up[rows, cols], w_lo[rows, cols], n0[rows, cols],
                            n1[rows, cols], n2[rows, cols], n3[rows, cols])


def solve_cluster_normals(A, B, C=None):
    """Least-squares corner normals ``v = -pinv(A) B`` and residual e = sqrt(objective).

    Works on stacks. The residual is evaluated from the quadratic and needs
    ``C``; without it ``None`` is returned in its place.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    v = -np.linalg.pinv(A, rcond=1e-12, hermitian=True) @ B
    if C is None:
        return v, None
    obj = (0.5 * np.einsum("...kc,...kl,...lc->...", v, A, v)
           + np.einsum("...kc,...kc->...", B, v) + np.asarray(C))
    return v, np.sqrt(np.maximum(obj, 0.0))


def cluster_lattice(v: np.ndarray, a: int) -> np.ndarray:
    """Cluster interpolation at the (a+1)^2 lattice points; v is (..., 4, 2)."""
    t = np.arange(a + 1) / a
    U = t[None, :, None]
    V = t[:, None, None]
    v = v[..., None, None, :, :]
    n0, n1, n2, n3 = v[..., 0, :], v[..., 1, :], v[..., 2, :], v[..., 3, :]
    upper = n0 * (1 - U - V) + n1 * U + n2 * V
    lower = n3 * (U + V - 1) + n2 * (1 - U) + n1 * (1 - V)
    return np.where(U + V <= 1, upper, lower)


def _direct_objective(a: int, lattice_diff: np.ndarray, w_up, w_lo) -> np.ndarray:
    """Exact weighted L2 objective from per-vertex differences (no cancellation)."""
    d = lattice_diff

    def tri(p, q, r):
        s = p + q + r
        return ((p**2).sum(-1) + (q**2).sum(-1) + (r**2).sum(-1) + (s**2).sum(-1)) / 24.0

    up = tri(d[..., :-1, :-1, :], d[..., :-1, 1:, :], d[..., 1:, :-1, :])
    lo = tri(d[..., 1:, 1:, :], d[..., 1:, :-1, :], d[..., :-1, 1:, :])
    return (w_up * up + w_lo * lo).sum(axis=(-1, -2))


def cluster_objective(field: NormalField, level: int, cell, v, epsilon: float = DEFAULT_EPSILON,
                      clamp: bool = True) -> float:
    """Weighted L2 misfit of corner normals ``v`` (4 x 2) on node ``cell``."""
    a = 1 << level
    I, J = cell
    rows = np.mod(np.arange(J * a, (J + 1) * a + 1), field.height)
    cols = np.mod(np.arange(I * a, (I + 1) * a + 1), field.width)
    leaf = field.texels[rows[:, None], cols[None, :]]
    diff = cluster_lattice(np.asarray(v, dtype=np.float64), a) - leaf
    w_up, w_lo = leaf_weights(field, epsilon, clamp)
    return float(_direct_objective(a, diff, w_up[rows[:-1, None], cols[None, :-1]],
                                   w_lo[rows[:-1, None], cols[None, :-1]]))


# --------------------------------------------------------------------------
# Hierarchies
# --------------------------------------------------------------------------

@dataclass(eq=False)
class MinMaxHierarchy:
    """Per-node normal-space AABBs; ``lo[l]`` and ``hi[l]`` are (H/2^l, W/2^l, 2)."""

    lo: list
    hi: list

    def contains(self, level: int, I, J, m) -> np.ndarray:
        lo = self.lo[level]
        hi = self.hi[level]
        rows = np.mod(J, lo.shape[0])
        cols = np.mod(I, lo.shape[1])
        m = np.asarray(m, dtype=np.float64)
        return np.all((lo[rows, cols] <= m) & (m <= hi[rows, cols]), axis=-1)


@dataclass(eq=False)
class ClusterHierarchy:
    """Cluster pyramid: ``normals[l]`` is (H/2^l, W/2^l, 4, 2), ``residual[l]`` (H/2^l, W/2^l)."""

    width: int
    height: int
    epsilon: float
    normals: list
    residual: list
    clamp_weights: bool = True
    minmax: MinMaxHierarchy | None = dc_field(default=None, repr=False)

    @property
    def depth(self) -> int:
        return len(self.normals) - 1

    def corners(self, level: int, I, J) -> np.ndarray:
        arr = self.normals[level]
        return arr[np.mod(J, arr.shape[0]), np.mod(I, arr.shape[1])]

    def node_residual(self, level: int, I, J) -> np.ndarray:
        arr = self.residual[level]
        return arr[np.mod(J, arr.shape[0]), np.mod(I, arr.shape[1])]


def _leaf_corners(field: NormalField) -> np.ndarray:
    return np.stack(field.corner_grids(), axis=2)


def build_clusters(field: NormalField, epsilon: float = DEFAULT_EPSILON,
                   clamp_weights: bool = True) -> ClusterHierarchy:
    """Solve cluster corners and residuals for every level, bottom-up."""
    w_up, w_lo = leaf_weights(field, epsilon, clamp_weights)
    n0, n1, n2, n3 = field.corner_grids()
    normals = [_leaf_corners(field)]
    residual = [np.zeros((field.height, field.width))]
    for level in range(1, field.depth + 1):
        a = 1 << level
        bw_up, bw_lo = _blocks(w_up, a), _blocks(w_lo, a)
        eqs = _assemble_blocks(a, bw_up, bw_lo, _blocks(n0, a), _blocks(n1, a),
                               _blocks(n2, a), _blocks(n3, a))
        v, _ = solve_cluster_normals(eqs.A, eqs.B)
        ny, nx = v.shape[:2]
        rows = np.mod(np.arange(ny)[:, None] * a + np.arange(a + 1)[None, :], field.height)
        cols = np.mod(np.arange(nx)[:, None] * a + np.arange(a + 1)[None, :], field.width)
        leaf = field.texels[rows[:, None, :, None], cols[None, :, None, :]]
        diff = cluster_lattice(v, a) - leaf
        obj = _direct_objective(a, diff, bw_up, bw_lo)
        normals.append(v)
        residual.append(np.sqrt(np.maximum(obj, 0.0)))
    return ClusterHierarchy(field.width, field.height, float(epsilon), normals, residual,
                            clamp_weights)


def _cluster_jacobians(v: np.ndarray, a: int):
    n0, n1, n2, n3 = (v[..., k, :] for k in range(4))
    scale = float(a * a)
    return np.abs(cross2(n2 - n0, n1 - n0)) / scale, np.abs(cross2(n2 - n3, n1 - n3)) / scale


def build_minmax(field: NormalField, clusters: ClusterHierarchy) -> MinMaxHierarchy:
    """AABBs over every leaf triangle below a node plus the node's own cluster cell.

    Triangles whose Jacobian is clamped are covered by the box around their
    equilateral replacement so pruning stays conservative.
    """
    eps = clusters.epsilon
    lo_levels, hi_levels = [], []
    for level, v in enumerate(clusters.normals):
        a = 1 << level
        lo = v.min(axis=-2)
        hi = v.max(axis=-2)
        j_up, j_lo = _cluster_jacobians(v, a)
        clamped = (j_up < eps) | (j_lo < eps)
        if np.any(clamped):
            center = 0.5 * (v[..., 1, :] + v[..., 2, :])
            rad = float(eqtri_circumradius(eps / 2.0))
            lo = np.where(clamped[..., None], np.minimum(lo, center - rad), lo)
            hi = np.where(clamped[..., None], np.maximum(hi, center + rad), hi)
        if level > 0:
            ny, nx = lo.shape[:2]
            prev_lo = lo_levels[-1].reshape(ny, 2, nx, 2, 2).min(axis=(1, 3))
            prev_hi = hi_levels[-1].reshape(ny, 2, nx, 2, 2).max(axis=(1, 3))
            lo = np.minimum(lo, prev_lo)
            hi = np.maximum(hi, prev_hi)
        lo_levels.append(lo)
        hi_levels.append(hi)
    return MinMaxHierarchy(lo_levels, hi_levels)


def build_hierarchy(field: NormalField, epsilon: float = DEFAULT_EPSILON,
                    clamp_weights: bool = True) -> ClusterHierarchy:
    """Cluster pyramid with its min-max pyramid attached."""
    hier = build_clusters(field, epsilon, clamp_weights)
    hier.minmax = build_minmax(field, hier)
    return hier


# --------------------------------------------------------------------------
# Cuts and traversal
# --------------------------------------------------------------------------

def entry_level(r, depth: int) -> int:
    """Traversal start level: ceil(max(log2 r_x, log2 r_y)) clamped to [0, depth]."""
    rx, ry = r
    if rx <= 0 or ry <= 0:
        raise ValueError("footprint half-extents must be positive")
    level = math.ceil(max(math.log2(rx), math.log2(ry)) - 1e-12)
    return int(min(max(level, 0), depth))


@dataclass(frozen=True, eq=False)
class Cut:
    """Disjoint nodes covering a footprint; arrays of (level, I, J), unwrapped.

    Nodes are sorted by (level, J, I), so a leaf-only cut lists cells in the
    same row-major order as a brute-force scan.
    """

    levels: np.ndarray
    I: np.ndarray
    J: np.ndarray
    entry_level: int
    threshold: float

    def __len__(self) -> int:
        return len(self.levels)

    def nodes(self):
        return list(zip(self.levels.tolist(), self.I.tolist(), self.J.tolist()))


def _overlap_range(lo: float, hi: float, a: int):
    return math.floor(lo / a), math.ceil(hi / a)


def _sorted_cut(levels, I, J, entry, threshold) -> Cut:
    levels = np.asarray(levels, dtype=np.int64)
    I = np.asarray(I, dtype=np.int64)
    J = np.asarray(J, dtype=np.int64)
    order = np.lexsort((I, J, levels))
    return Cut(levels[order], I[order], J[order], entry, threshold)


def leaf_cut(q: FootprintQuery) -> Cut:
    """All leaf cells overlapping the kernel support (no hierarchy)."""
    i0, i1, j0, j1 = support_cells(q)
    J, I = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1), indexing="ij")
    return Cut(np.zeros(I.size, dtype=np.int64), I.ravel(), J.ravel(), 0, 0.0)


def select_cut(hier: ClusterHierarchy, q: FootprintQuery, tau: float) -> Cut:
    """Descend from the entry level until ``e_l <= r_x r_y tau`` or a leaf is reached.

    ``tau == 0`` always descends to the leaves, so the result matches the
    unaccelerated evaluation even where a cluster fits its cells exactly.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    threshold = q.r[0] * q.r[1] * tau
    top = entry_level(q.r, hier.depth)
    lo, hi = q.lower, q.upper
    a = 1 << top
    i0, i1 = _overlap_range(lo[0], hi[0], a)
    j0, j1 = _overlap_range(lo[1], hi[1], a)
    J, I = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    out_l, out_i, out_j = [], [], []
    for level in range(top, -1, -1):
        if I.size == 0:
            break
        e = hier.node_residual(level, I, J)
        accept = ((e <= threshold) & (tau > 0)) | (level == 0)
        out_l.append(np.full(int(accept.sum()), level))
        out_i.append(I[accept])
        out_j.append(J[accept])
        I, J = I[~accept], J[~accept]
        if level == 0:
            break
        ci = (2 * I[:, None] + np.array([0, 1, 0, 1])[None, :]).ravel()
        cj = (2 * J[:, None] + np.array([0, 0, 1, 1])[None, :]).ravel()
        a = 1 << (level - 1)
        keep = ((ci * a < hi[0]) & ((ci + 1) * a > lo[0])
                & (cj * a < hi[1]) & ((cj + 1) * a > lo[1]))
        I, J = ci[keep], cj[keep]
    return _sorted_cut(np.concatenate(out_l), np.concatenate(out_i), np.concatenate(out_j),
                       top, threshold)


def node_triangles(corners: np.ndarray, levels, I, J):
    """Spatial (K, 2, 3, 2) and normal (K, 2, 3, 2) vertices for cut nodes.

    Index 0 of axis 1 is the upper triangle (n0, n1, n2), index 1 the lower
    triangle (n3, n2, n1).
    """
    a = (1 << np.asarray(levels, dtype=np.int64)).astype(np.float64)
    ox = np.asarray(I, dtype=np.float64) * a
    oy = np.asarray(J, dtype=np.float64) * a
    o = np.stack([ox, oy], axis=-1)[:, None, :]
    unit_up = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    unit_lo = np.array([[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    sp_up = o + a[:, None, None] * unit_up
    sp_lo = o + a[:, None, None] * unit_lo
    spatial = np.stack([sp_up, sp_lo], axis=1)
    c = corners
    normals = np.stack([c[:, [0, 1, 2], :], c[:, [3, 2, 1], :]], axis=1)
    return spatial, normals


def cut_corners(field: NormalField, hier: ClusterHierarchy | None, cut: Cut) -> np.ndarray:
    """Corner normals (K, 4, 2) for every node of a cut; level 0 reads the field."""
    out = np.empty((len(cut), 4, 2))
    for level in np.unique(cut.levels):
        sel = cut.levels == level
        if level == 0:
            out[sel] = np.stack(field.corners(cut.I[sel], cut.J[sel]), axis=1)
        else:
            out[sel] = hier.corners(int(level), cut.I[sel], cut.J[sel])
    return out


def cut_aabbs(minmax: MinMaxHierarchy, cut: Cut):
    lo = np.empty((len(cut), 2))
    hi = np.empty((len(cut), 2))
    for level in np.unique(cut.levels):
        sel = cut.levels == level
        arr_lo, arr_hi = minmax.lo[int(level)], minmax.hi[int(level)]
        rows = np.mod(cut.J[sel], arr_lo.shape[0])
        cols = np.mod(cut.I[sel], arr_lo.shape[1])
        lo[sel] = arr_lo[rows, cols]
        hi[sel] = arr_hi[rows, cols]
    return lo, hi


def candidates(field: NormalField, hier: ClusterHierarchy, minmax: MinMaxHierarchy, cut: Cut,
               m) -> Iterator[tuple[NormalTriangle, int]]:
    """Cluster triangles of cut nodes whose min-max box contains ``m``."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = cut_aabbs(minmax, cut)
    hit = np.all((lo <= m) & (m <= hi), axis=-1)
    if not np.any(hit):
        return
    levels, I, J = cut.levels[hit], cut.I[hit], cut.J[hit]
    sub = Cut(levels, I, J, cut.entry_level, cut.threshold)
    spatial, normals = node_triangles(cut_corners(field, hier, sub), levels, I, J)
    for k, level in enumerate(levels.tolist()):
        for half in range(2):
            yield NormalTriangle.from_vertices(spatial[k, half], normals[k, half]), level


# --------------------------------------------------------------------------
# Cache file
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<IIdII")  # width, height, epsilon, version, flags


def _round_out(x: np.ndarray, direction: float) -> np.ndarray:
    y = x.astype("<f4")
    bad = (y > x) if direction < 0 else (y < x)
    y[bad] = np.nextafter(y[bad], np.float32(direction))
    return y


def save_cache(hier: ClusterHierarchy, path) -> None:
    if hier.minmax is None:
        raise ValueError("hierarchy has no min-max pyramid attached")
    flags = 1 if hier.clamp_weights else 0
    parts = [CACHE_MAGIC, _HEADER.pack(hier.width, hier.height, hier.epsilon, CACHE_VERSION, flags)]
    for level in range(hier.depth + 1):
        parts.append(_round_out(hier.minmax.lo[level], -np.inf).tobytes())
        parts.append(_round_out(hier.minmax.hi[level], np.inf).tobytes())
        parts.append(hier.normals[level].astype("<f4").tobytes())
        parts.append(hier.residual[level].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class CacheError(ValueError):
    pass


def load_cache(path, field: NormalField | None = None) -> ClusterHierarchy:
    raw = Path(path).read_bytes()
    if not raw.startswith(CACHE_MAGIC):
        raise CacheError(f"{path}: not a hierarchy cache (bad magic)")
    off = len(CACHE_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise CacheError(f"{path}: truncated header")
    width, height, eps, version, flags = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    if field is not None and (field.width, field.height) != (width, height):
        raise CacheError(f"{path}: cache is {width}x{height}, map is {field.width}x{field.height}")
    depth = int(math.log2(min(width, height)))
    lo, hi, normals, residual = [], [], [], []

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(raw):
            raise CacheError(f"{path}: truncated level data")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float64)
        off = end
        return arr.reshape(shape)

    for level in range(depth + 1):
        ny, nx = height >> level, width >> level
        lo.append(take((ny, nx, 2)))
        hi.append(take((ny, nx, 2)))
        normals.append(take((ny, nx, 4, 2)))
        residual.append(take((ny, nx)))
    if off != len(raw):
        raise CacheError(f"{path}: {len(raw) - off} trailing bytes")
    if field is not None:
        normals[0] = _leaf_corners(field)
        residual[0] = np.zeros((height, width))
    hier = ClusterHierarchy(width, height, eps, normals, residual, bool(flags & 1))
    hier.minmax = MinMaxHierarchy(lo, hi)
    return hier
