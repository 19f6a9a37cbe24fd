"""Footprint kernels k_r(u - x) over texture space.

All kernels are supported on the box ``|u - x| <= r`` (per axis) and integrate
to one. The Gaussian uses sigma = r / 3 per axis and is renormalized after
truncation to the box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

GAUSSIAN = "gaussian"
DISK = "disk"
BOX = "box"
KINDS = (GAUSSIAN, DISK, BOX)

TRUNCATION = 3.0  # support half-width in units of sigma
_GAUSS_MASS = math.erf(TRUNCATION / math.sqrt(2.0))  # per-axis mass kept


@dataclass(frozen=True)
class FootprintQuery:
    x: tuple[float, float]
    r: tuple[float, float]
    kind: str = GAUSSIAN

    def __post_init__(self):
        x = tuple(float(v) for v in self.x)
        r = tuple(float(v) for v in self.r)
        if len(x) != 2 or len(r) != 2:
            raise ValueError("x and r must be 2D")
        if not (r[0] > 0 and r[1] > 0):
            raise ValueError(f"footprint half-extents must be positive, got {r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "r", r)

    @property
    def lower(self) -> np.ndarray:
        return np.subtract(self.x, self.r)

    @property
    def upper(self) -> np.ndarray:
        return np.add(self.x, self.r)

    @property
    def sigma(self) -> np.ndarray:
        return np.asarray(self.r) / TRUNCATION


def peak_density(q: FootprintQuery) -> float:
    rx, ry = q.r
    if q.kind == BOX:
        return 1.0 / (4.0 * rx * ry)
    if q.kind == DISK:
        return 1.0 / (math.pi * rx * ry)
    sx, sy = q.sigma
    return 1.0 / (2.0 * math.pi * sx * sy * _GAUSS_MASS ** 2)


def kernel_eval(q: FootprintQuery, u) -> np.ndarray:
    """Kernel density (texel^-2) at texture coordinates ``u[..., 2]``."""
    d = (np.asarray(u, dtype=np.float64) - q.x) / q.r
    inside = (np.abs(d[..., 0]) <= 1.0) & (np.abs(d[..., 1]) <= 1.0)
    if q.kind == BOX:
        val = np.full(d.shape[:-1], peak_density(q))
    elif q.kind == DISK:
        inside &= d[..., 0] ** 2 + d[..., 1] ** 2 <= 1.0
        val = np.full(d.shape[:-1], peak_density(q))
    else:
        z2 = (TRUNCATION ** 2) * (d[..., 0] ** 2 + d[..., 1] ** 2)
        val = peak_density(q) * np.exp(-0.5 * z2)
    return np.where(inside, val, 0.0)


def kernel_sample(q: FootprintQuery, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw texture coordinates distributed as the kernel; shape (n, 2) or (2,)."""
    count = 1 if n is None else int(n)
    xi = rng.random((count, 2))
    x = np.asarray(q.x)
    r = np.asarray(q.r)
    if q.kind == BOX:
        u = x + (2.0 * xi - 1.0) * r
    elif q.kind == DISK:
        rad = np.sqrt(xi[:, 0])
        phi = 2.0 * np.pi * xi[:, 1]
        u = x + r * np.stack([rad * np.cos(phi), rad * np.sin(phi)], axis=-1)
    else:
        lo = ndtr(-TRUNCATION)
        z = ndtri(lo + xi * (1.0 - 2.0 * lo))
        u = x + np.clip(z, -TRUNCATION, TRUNCATION) * q.sigma
    return u[0] if n is None else u


def gaussian_marginal_cdf(q: FootprintQuery, t, axis: int = 0) -> np.ndarray:
    """CDF of the truncated Gaussian kernel along one axis."""
    z = (np.asarray(t, dtype=np.float64) - q.x[axis]) / q.sigma[axis]
    z = np.clip(z, -TRUNCATION, TRUNCATION)
    lo = ndtr(-TRUNCATION)
    return (ndtr(z) - lo) / (1.0 - 2.0 * lo)


def kernel_on_triangle(q: FootprintQuery, t) -> float:
    """Piecewise-constant kernel value of a triangle: the density at its centroid."""
    spatial = t.spatial if hasattr(t, "spatial") else np.asarray(t)
    return float(kernel_eval(q, np.mean(spatial, axis=0)))


def support_cells(q: FootprintQuery):
    """Integer cell ranges ``[i0, i1) x [j0, j1)`` whose unit squares overlap the support."""
    lo, hi = q.lower, q.upper
    i0, j0 = (int(math.floor(v)) for v in lo)
    i1, j1 = (int(math.ceil(v)) for v in hi)
    return i0, max(i1, i0 + 1), j0, max(j1, j0 + 1)
