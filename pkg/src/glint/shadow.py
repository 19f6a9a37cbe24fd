"""Projected area of a footprint P-NDF, Smith shadowing-masking and GGX surrogates.

P(w) = integral of D(m) max(m~ . w, 0) over solid angle. With the kernel held
constant on each triangle, P is a weighted sum of per-triangle area integrals
over the visible part of each normal triangle. Each integral is turned into a
boundary integral whose pieces are straight edges and arcs of the visibility
ellipse ``(m_x / w_z)^2 + m_y^2 = 1`` (in the frame where ``w_y = 0``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .hierarchy import DEFAULT_TAU, ClusterHierarchy
from .kernels import BOX, FootprintQuery, kernel_eval
from .normal_field import NormalField, NormalTriangle, signed_area, unproject
from .pndf import ClampPolicy, DomainError, FootprintNDF
from .trigeom import eqtri_vertices

MIN_OMEGA_Z = 1e-4
GRAZING_Z = 1e-4
FIT_AZIMUTHS = 16

LINE = "line"
ARC = "arc"
SEPARABLE = "separable"
CORRELATED = "correlated"


# --------------------------------------------------------------------------
# Canonical frame and clipping
# --------------------------------------------------------------------------

def canonical_rotate(omega):
    """In-plane rotation angle taking ``omega`` to ``w_y = 0, w_x >= 0``, and the rotated vector."""
    omega = np.asarray(omega, dtype=np.float64)
    if not omega[2] > 0:
        raise DomainError("direction must lie in the upper hemisphere")
    rho = math.hypot(omega[0], omega[1])
    if rho < 1e-9:
        return 0.0, omega.copy()
    angle = -math.atan2(omega[1], omega[0])
    return angle, np.array([rho, 0.0, omega[2]])


def rotate2(v, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


class EdgeClip(NamedTuple):
    start: np.ndarray
    end: np.ndarray
    keep: np.ndarray
    clip0: np.ndarray
    clip1: np.ndarray


def clip_edges(p, q, omega_z) -> EdgeClip:
    """Clip edges p -> q (arrays (..., 2)) to the visible region for the given w_z."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    wz2 = np.asarray(omega_z, dtype=np.float64) ** 2
    d = q - p
    a = wz2 * d[..., 1] ** 2 + d[..., 0] ** 2
    b = 2.0 * (wz2 * p[..., 1] * d[..., 1] + p[..., 0] * d[..., 0])
    c0 = wz2 * (p[..., 1] ** 2 - 1.0) + p[..., 0] ** 2
    c1 = wz2 * (q[..., 1] ** 2 - 1.0) + q[..., 0] ** 2
    disc = b * b - 4.0 * a * c0
    clip0 = (c0 > 0) & (p[..., 0] < 0)
    clip1 = (c1 > 0) & (q[..., 0] < 0)
    any_clip = clip0 | clip1
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(a > 0, (-b - sq) / (2.0 * a), 0.0)
        t1 = np.where(a > 0, (-b + sq) / (2.0 * a), 1.0)
    drop = any_clip & ((disc < 0) | (a <= 0))
    drop |= clip0 & clip1 & ((t0 < 0) | (t0 > 1) | (t1 < 0) | (t1 > 1))
    start = np.where(clip0[..., None], p + t0[..., None] * d, p)
    end = np.where(clip1[..., None], p + t1[..., None] * d, q)
    keep = ~drop
    return EdgeClip(start, end, keep, clip0 & keep, clip1 & keep)


def clip_edge_to_ellipse(ni, nj, omega_z):
    """Clipped endpoints of one edge, or None when the edge is invisible."""
    r = clip_edges(ni, nj, omega_z)
    if not bool(r.keep):
        return None
    return r.start, r.end


@dataclass(frozen=True)
class BoundarySegment:
    kind: str
    start: np.ndarray
    end: np.ndarray


def _ccw(normals: np.ndarray) -> np.ndarray:
    """Reorder triangles (..., 3, 2) counterclockwise."""
    flip = signed_area(normals) < 0
    out = normals.copy()
    out[flip, 1], out[flip, 2] = normals[flip, 2], normals[flip, 1]
    return out


def build_clipped_boundary(t, omega_z: float) -> list:
    """Closed counterclockwise boundary of the visible part of a normal triangle."""
    normals = t.normals if isinstance(t, NormalTriangle) else np.asarray(t, dtype=np.float64)
    v = _ccw(normals[None])[0]
    r = clip_edges(v, np.roll(v, -1, axis=0), omega_z)
    lines = [BoundarySegment(LINE, r.start[k], r.end[k]) for k in range(3) if r.keep[k]]
    flags = [(bool(r.clip0[k]), bool(r.clip1[k])) for k in range(3) if r.keep[k]]
    out = []
    for k, seg in enumerate(lines):
        out.append(seg)
        nxt = (k + 1) % len(lines)
        if flags[k][1] or flags[nxt][0]:
            out.append(BoundarySegment(ARC, seg.end, lines[nxt].start))
    return out


# --------------------------------------------------------------------------
# Boundary integrals
# --------------------------------------------------------------------------

def _F(x):
    x = np.clip(x, -1.0, 1.0)
    return np.arcsin(x) + x * np.sqrt(np.maximum(0.0, 1.0 - x * x))


def line_segment_integral(ni, nj, omega) -> np.ndarray:
    """Integral of (w_z m_x - w_x m~_z) dm_y along the straight edge ni -> nj (canonical frame)."""
    ni = np.asarray(ni, dtype=np.float64)
    nj = np.asarray(nj, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    wx, wz = omega[..., 0], omega[..., 2]
    diff = nj - ni
    length = np.hypot(diff[..., 0], diff[..., 1])
    shoelace = 0.5 * wz * diff[..., 1] * (nj[..., 0] + ni[..., 0])
    safe = np.maximum(length, 1e-300)
    d = diff / safe[..., None]
    s = d[..., 1] * ni[..., 0] - d[..., 0] * ni[..., 1]
    r2 = np.maximum(1.0 - s * s, 0.0)
    r = np.sqrt(r2)
    with np.errstate(divide="ignore", invalid="ignore"):
        p0 = np.where(r > 0, (d * ni).sum(-1) / r, 0.0)
        p1 = np.where(r > 0, (d * nj).sum(-1) / r, 0.0)
    curved = 0.5 * wx * r2 * d[..., 1] * (_F(p1) - _F(p0))
    return np.where(length < 1e-12, 0.0, shoelace - curved)


def arc_integral(ni, nj) -> np.ndarray:
    """Integral of -sqrt(1 - m_y^2) dm_y along the visibility ellipse from ni to nj."""
    ni = np.asarray(ni, dtype=np.float64)
    nj = np.asarray(nj, dtype=np.float64)
    return 0.5 * (_F(ni[..., 1]) - _F(nj[..., 1]))


def boundary_integral(segments, omega) -> float:
    total = 0.0
    for seg in segments:
        if seg.kind == LINE:
            total += float(line_segment_integral(seg.start, seg.end, omega))
        else:
            total += float(arc_integral(seg.start, seg.end))
    return total


def triangle_integrals(normals, omega) -> np.ndarray:
    """Visible-area integrals of (w_x m_x / m_z + w_z) over triangles ``normals[..., 3, 2]``.

    ``omega`` (..., 3) broadcasts against the leading triangle dimensions and
    must already be in the canonical frame, as must the normals.
    """
    v = _ccw(np.asarray(normals, dtype=np.float64))
    w = np.asarray(omega, dtype=np.float64)
    total = np.zeros(np.broadcast_shapes(v.shape[:-2], w.shape[:-1]))
    for k in range(3):
        r = clip_edges(v[..., k, :], v[..., (k + 1) % 3, :], w[..., 2])
        val = line_segment_integral(r.start, r.end, w)
        val = val + np.where(r.clip1, 0.5 * _F(r.end[..., 1]), 0.0)
        val = val - np.where(r.clip0, 0.5 * _F(r.start[..., 1]), 0.0)
        total += np.where(r.keep, val, 0.0)
    return total


# --------------------------------------------------------------------------
# Projected area
# --------------------------------------------------------------------------

def _clamped_omega(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if omega[2] <= 0:
        raise DomainError("direction must lie in the upper hemisphere")
    if omega[2] < MIN_OMEGA_Z:
        xy = omega[:2] / max(math.hypot(omega[0], omega[1]), 1e-300)
        omega = np.array([*(xy * math.sqrt(1 - MIN_OMEGA_Z ** 2)), MIN_OMEGA_Z])
    return omega / np.linalg.norm(omega)


def triangle_weights(ndf: FootprintNDF) -> np.ndarray:
    """Piecewise-constant kernel weight per triangle divided by its normal-space area.

    Weights are the kernel at the spatial centroid times the spatial area,
    renormalized to sum to one.
    """
    sp_area = 0.5 * ndf.node_size ** 2
    w = kernel_eval(ndf.q, ndf.spatial.mean(axis=1)) * sp_area
    total = w.sum()
    w = w / total if total > 0 else sp_area / sp_area.sum()
    return w / np.abs(signed_area(ndf.normals))


def projected_area_ndf(ndf: FootprintNDF, omega) -> np.ndarray:
    """Analytic projected area for one direction (3,) or many (..., 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    dirs = omega.reshape(-1, 3)
    coef = triangle_weights(ndf)
    live = coef > 0
    coef = coef[live]
    tris = ndf.normals[live]
    out = np.empty(len(dirs))
    step = max(1, (1 << 19) // max(len(tris), 1))
    for s in range(0, len(dirs), step):
        chunk = dirs[s:s + step]
        rot = np.empty((len(chunk),) + tris.shape)
        canon = np.empty((len(chunk), 1, 3))
        for k, w in enumerate(chunk):
            angle, canon[k, 0] = canonical_rotate(_clamped_omega(w))
            rot[k] = rotate2(tris, angle)
        out[s:s + step] = np.maximum(triangle_integrals(rot, canon) @ coef, 0.0)
    return float(out[0]) if omega.ndim == 1 else out.reshape(omega.shape[:-1])


def projected_area(field: NormalField, hier: ClusterHierarchy | None, q: FootprintQuery, omega,
                   policy: ClampPolicy = ClampPolicy(), tau: float = DEFAULT_TAU) -> float:
    """Analytic projected area of the footprint's P-NDF toward ``omega``."""
    return projected_area_ndf(FootprintNDF(field, q, hier, tau, policy), omega)


def projected_area_mc(field: NormalField, q: FootprintQuery, omega, n_samples: int, rng=None,
                      policy: ClampPolicy = ClampPolicy()):
    """Monte Carlo projected area from leaf-level P-NDF samples: (estimate, standard error)."""
    if n_samples < 10_000:
        raise ValueError("use at least 1e4 samples")
    omega = np.asarray(omega, dtype=np.float64)
    rng = np.random.default_rng(rng)
    ndf = FootprintNDF(field, q, None, policy=policy)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        k = min(1 << 20, n_samples - done)
        m = ndf.sample(rng, k)
        mt = unproject(np.clip(m, -1.0, 1.0) / np.maximum(1.0, np.hypot(m[:, 0], m[:, 1]))[:, None])
        val = np.maximum(mt @ omega, 0.0) / np.maximum(mt[:, 2], 1e-12)
        total += val.sum()
        total_sq += (val * val).sum()
        done += k
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0)
    return mean, math.sqrt(var / n_samples)


def hemisphere_grid(n: int, min_z: float = 0.0):
    """Directions at the centers of an n x n grid over the projected disk (row 0 on top).

    Returns (directions (n, n, 3), mask of valid cells).
    """
    c = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    x, y = np.meshgrid(c, c[::-1])
    r2 = x * x + y * y
    z = np.sqrt(np.maximum(0.0, 1.0 - r2))
    mask = (r2 < 1.0) & (z >= min_z) & (z > 0)
    return np.stack([x, y, z], axis=-1), mask


# --------------------------------------------------------------------------
# Smith terms
# --------------------------------------------------------------------------

def smith_lambda(P, omega_z):
    omega_z = np.asarray(omega_z, dtype=np.float64)
    if np.any(omega_z <= 0):
        raise DomainError("omega_z must be positive")
    return np.asarray(P) / omega_z - 1.0


def smith_g(omega_i, omega_o, m_tilde, lambda_i, lambda_o, variant: str = SEPARABLE):
    hi = np.asarray(np.dot(m_tilde, omega_i) > 0, dtype=np.float64)
    ho = np.asarray(np.dot(m_tilde, omega_o) > 0, dtype=np.float64)
    if variant == SEPARABLE:
        return hi * ho / ((1.0 + lambda_i) * (1.0 + lambda_o))
    if variant == CORRELATED:
        return hi * ho / (1.0 + lambda_i + lambda_o)
    raise ValueError(f"unknown Smith variant {variant!r}")


def diffuse_brdf(P_omega_i, omega_i_z):
    """Kernel-averaged normal-mapped Lambertian BRDF, P(w_i) / (pi w_iz)."""
    omega_i_z = np.asarray(omega_i_z, dtype=np.float64)
    if np.any(omega_i_z <= 0):
        raise DomainError("omega_i_z must be positive")
    return np.asarray(P_omega_i) / (math.pi * omega_i_z)


# --------------------------------------------------------------------------
# GGX surrogate
# --------------------------------------------------------------------------

class GGXFit(NamedTuple):
    Omega: np.ndarray
    alpha: np.ndarray
    Q: np.ndarray


def ggx_projected_area(Omega, omega) -> np.ndarray:
    """Smooth GGX projected area 1/2 (w_z + sqrt(w_z^2 + w_xy^T Omega w_xy))."""
    Omega = np.asarray(Omega, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    xy = omega[..., :2]
    quad = np.einsum("...i,...ij,...j->...", xy, Omega, xy)
    wz = omega[..., 2]
    return 0.5 * (wz + np.sqrt(np.maximum(wz * wz + quad, 0.0)))


def grazing_directions(k: int = FIT_AZIMUTHS, z: float = GRAZING_Z) -> np.ndarray:
    phi = 2.0 * np.pi * np.arange(k) / k
    s = math.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), np.full(k, z)], axis=-1)


def solve_omega(P_grazing, directions=None) -> np.ndarray:
    """Least-squares Omega (..., 2, 2) reproducing P at grazing directions under the GGX model."""
    d = grazing_directions() if directions is None else np.asarray(directions)
    P = np.asarray(P_grazing, dtype=np.float64)
    wz = d[:, 2]
    rhs = (2.0 * P - wz) ** 2 - wz ** 2
    x, y = d[:, 0], d[:, 1]
    design = np.stack([x * x, 2 * x * y, y * y], axis=-1)
    coef = rhs @ np.linalg.pinv(design).T
    Omega = np.empty(P.shape[:-1] + (2, 2))
    Omega[..., 0, 0] = coef[..., 0]
    Omega[..., 0, 1] = Omega[..., 1, 0] = coef[..., 1]
    Omega[..., 1, 1] = coef[..., 2]
    return Omega


def decompose_omega(Omega) -> GGXFit:
    """PSD projection and eigendecomposition Omega = Q^T diag(alpha^2) Q, alpha descending."""
    Omega = np.asarray(Omega, dtype=np.float64)
    lam, vec = np.linalg.eigh(Omega)
    lam = np.maximum(lam[..., ::-1], 0.0)
    vec = vec[..., :, ::-1]
    Q = np.swapaxes(vec, -1, -2)
    psd = np.einsum("...ki,...k,...kj->...ij", Q, lam, Q)
    return GGXFit(psd, np.sqrt(lam), Q)


def fit_ggx(field: NormalField, level: int, grid_center, policy: ClampPolicy = ClampPolicy()) -> GGXFit:
    """Fit the GGX surrogate to the box footprint of half-extent 2^(level-1) at ``grid_center``."""
    half = 2.0 ** (level - 1)
    ndf = FootprintNDF(field, FootprintQuery(tuple(grid_center), (half, half), BOX), None,
                       policy=policy)
    P = np.array([projected_area_ndf(ndf, w) for w in grazing_directions()])
    return decompose_omega(solve_omega(P))


def _leaf_triangles(field: NormalField, epsilon: float) -> np.ndarray:
    """Effective normal triangles of every leaf, shape (H, W, 2, 3, 2)."""
    n0, n1, n2, n3 = field.corner_grids()
    tri = np.stack([np.stack([n0, n1, n2], axis=-2), np.stack([n3, n2, n1], axis=-2)], axis=2)
    jac = 2.0 * np.abs(signed_area(tri))
    low = jac < epsilon
    if np.any(low):
        center = 0.5 * (tri[..., 1, :] + tri[..., 2, :])
        rep = center[..., None, :] + eqtri_vertices(0.5 * epsilon)
        tri = np.where(low[..., None, None], rep, tri)
    return tri


class GGXTable:
    """Per-level, per-cell GGX fits for levels 2..depth, sampled bilinearly."""

    MAGIC = b"GGX1"
    _HEADER = struct.Struct("<IIII")  # width, height, first level, last level

    def __init__(self, width: int, height: int, omegas: dict):
        self.width = width
        self.height = height
        self.omegas = omegas

    @classmethod
    def build(cls, field: NormalField, policy: ClampPolicy = ClampPolicy(), min_level: int = 2):
        tri = _leaf_triangles(field, policy.epsilon)
        h, w = field.height, field.width
        flat = tri.reshape(-1, 3, 2)
        inv_area = 1.0 / np.abs(signed_area(flat))
        dirs = grazing_directions()
        per_leaf = np.empty((h, w, len(dirs)))
        for k, d in enumerate(dirs):
            angle, wc = canonical_rotate(d)
            vals = triangle_integrals(rotate2(flat, angle), wc) * inv_area * 0.5
            per_leaf[..., k] = vals.reshape(h, w, 2).sum(axis=-1)
        omegas = {}
        acc = per_leaf
        for level in range(1, field.depth + 1):
            ny, nx = acc.shape[0] // 2, acc.shape[1] // 2
            acc = acc.reshape(ny, 2, nx, 2, -1).sum(axis=(1, 3))
            if level >= min_level:
                P = acc / float(4 ** level)
                omegas[level] = decompose_omega(solve_omega(P)).Omega
        return cls(w, h, omegas)

    def level_for(self, r) -> int:
        levels = sorted(self.omegas)
        want = int(round(math.log2(max(2.0 * max(r), 1e-12))))
        return min(max(want, levels[0]), levels[-1])

    def lookup(self, x, r) -> np.ndarray:
        """Bilinearly interpolated Omega at texture point ``x`` for footprint ``r``."""
        level = self.level_for(r)
        grid = self.omegas[level]
        a = float(1 << level)
        gx = x[0] / a - 0.5
        gy = x[1] / a - 0.5
        i0, j0 = math.floor(gx), math.floor(gy)
        fx, fy = gx - i0, gy - j0
        ny, nx = grid.shape[:2]

        def at(i, j):
            return grid[j % ny, i % nx]

        return ((1 - fx) * (1 - fy) * at(i0, j0) + fx * (1 - fy) * at(i0 + 1, j0)
                + (1 - fx) * fy * at(i0, j0 + 1) + fx * fy * at(i0 + 1, j0 + 1))

    def projected_area(self, x, r, omega) -> float:
        return float(ggx_projected_area(self.lookup(x, r), _clamped_omega(omega)))

    def save(self, path) -> None:
        levels = sorted(self.omegas)
        parts = [self.MAGIC, self._HEADER.pack(self.width, self.height, levels[0], levels[-1])]
        for level in levels:
            om = self.omegas[level]
            unique = np.stack([om[..., 0, 0], om[..., 0, 1], om[..., 1, 1]], axis=-1)
            parts.append(unique.astype("<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "GGXTable":
        raw = Path(path).read_bytes()
        if not raw.startswith(cls.MAGIC):
            raise ValueError(f"{path}: not a GGX table")
        off = len(cls.MAGIC)
        w, h, first, last = cls._HEADER.unpack_from(raw, off)
        off += cls._HEADER.size
        omegas = {}
        for level in range(first, last + 1):
            ny, nx = h >> level, w >> level
            count = ny * nx * 3
            if off + 4 * count > len(raw):
                raise ValueError(f"{path}: truncated GGX table")
            u = np.frombuffer(raw, "<f4", count, off).astype(np.float64).reshape(ny, nx, 3)
            off += 4 * count
            om = np.empty((ny, nx, 2, 2))
            om[..., 0, 0], om[..., 0, 1], om[..., 1, 0], om[..., 1, 1] = u[..., 0], u[..., 1], u[..., 1], u[..., 2]
            omegas[level] = om
        return cls(w, h, omegas)
