"""Normal maps on the projected hemisphere and their triangulated manifold view.

Texel ``(i, j)`` sits at texture coordinate ``u = (i, j)`` (``i`` along x, ``j``
along y); ``texels[j, i]`` holds its projected normal. Addressing wraps, so a
``W x H`` map has ``W x H`` cells, each split into an upper triangle
``u0, u1, u2`` and a lower triangle ``u3, u2, u1`` with

    u0 = (i, j), u1 = (i + 1, j), u2 = (i, j + 1), u3 = (i + 1, j + 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .imgio import read_pfm, read_png_rgb

UPPER = "upper"
LOWER = "lower"

_NORM_TOL = 1e-9


class InvalidNormalError(ValueError):
    """A projected normal lies outside the unit disk."""


class CellId(NamedTuple):
    i: int
    j: int
    half: str = UPPER


@dataclass(frozen=True, eq=False)
class NormalTriangle:
    """Spatial triangle (texels) paired with its image in projected-normal space.

    ``signed_area`` is the counterclockwise-positive area of the normal
    triangle, so ``2 * |signed_area|`` is the interpolation Jacobian for a
    unit-cell half.
    """

    spatial: np.ndarray
    normals: np.ndarray
    signed_area: float

    @classmethod
    def from_vertices(cls, spatial, normals) -> "NormalTriangle":
        spatial = np.asarray(spatial, dtype=np.float64).reshape(3, 2)
        normals = np.asarray(normals, dtype=np.float64).reshape(3, 2)
        return cls(spatial, normals, float(signed_area(normals)))

    @property
    def spatial_area(self) -> float:
        return abs(float(signed_area(self.spatial)))

    @property
    def jacobian(self) -> float:
        """|det J| of the affine map from the spatial to the normal triangle."""
        return abs(self.signed_area) / self.spatial_area

    @property
    def centroid(self) -> np.ndarray:
        return self.spatial.mean(axis=0)


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def signed_area(v) -> np.ndarray:
    """Counterclockwise-positive area of triangles ``v[..., 3, 2]``."""
    v = np.asarray(v, dtype=np.float64)
    return 0.5 * cross2(v[..., 1, :] - v[..., 0, :], v[..., 2, :] - v[..., 0, :])


def _is_pow2(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


class NormalField:
    """Immutable W x H grid of projected-hemisphere normals with wrap addressing."""

    def __init__(self, texels):
        texels = np.array(texels, dtype=np.float64)
        if texels.ndim != 3 or texels.shape[2] != 2:
            raise ValueError(f"texels must have shape (H, W, 2), got {texels.shape}")
        h, w = texels.shape[:2]
        if not (_is_pow2(w) and _is_pow2(h)):
            raise ValueError(f"normal map size {w}x{h} is not a power of two >= 2")
        norms = np.hypot(texels[..., 0], texels[..., 1])
        if not np.all(np.isfinite(texels)) or np.any(norms > 1.0 + _NORM_TOL):
            raise InvalidNormalError("texel normals must lie in the closed unit disk")
        over = norms > 1.0
        texels[over] /= norms[over, None]
        texels.setflags(write=False)
        self.texels = texels

    @property
    def width(self) -> int:
        return self.texels.shape[1]

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @property
    def depth(self) -> int:
        """Number of mip levels above the leaves, log2(min(W, H))."""
        return int(np.log2(min(self.width, self.height)))

    def __repr__(self) -> str:
        return f"NormalField({self.width}x{self.height})"

    @classmethod
    def from_vectors(cls, xyz) -> "NormalField":
        """Build from unit-ish 3D normals: renormalize, fold to z >= 0, project."""
        xyz = np.asarray(xyz, dtype=np.float64)
        xyz = xyz.copy()
        xyz[..., 2] = np.maximum(xyz[..., 2], 0.0)
        length = np.linalg.norm(xyz, axis=-1, keepdims=True)
        degenerate = length[..., 0] < 1e-12
        xyz = np.where(degenerate[..., None], [0.0, 0.0, 1.0], xyz / np.maximum(length, 1e-300))
        xy = xyz[..., :2]
        norms = np.hypot(xy[..., 0], xy[..., 1])
        xy = np.where((norms > 1.0)[..., None], xy / np.maximum(norms, 1.0)[..., None], xy)
        return cls(xy)

    @classmethod
    def load(cls, path) -> "NormalField":
        """Load a PFM (components in [-1, 1]) or 8/16-bit PNG (0.5 * (n + 1))."""
        path = Path(path)
        if path.suffix.lower() == ".pfm":
            img = read_pfm(path)
            if img.channels != 3:
                raise ValueError(f"{path}: normal maps need three channels")
            xyz = img.data.astype(np.float64)
        elif path.suffix.lower() == ".png":
            xyz = 2.0 * read_png_rgb(path) - 1.0
        else:
            raise ValueError(f"{path}: unsupported normal-map format")
        return cls.from_vectors(xyz)

    def to_vectors(self) -> np.ndarray:
        return unproject(self.texels)

    def texel(self, i, j) -> np.ndarray:
        return self.texels[np.mod(j, self.height), np.mod(i, self.width)]

    def corners(self, i, j):
        """Corner normals n0, n1, n2, n3 of cells ``(i, j)`` (broadcasting)."""
        i = np.asarray(i)
        j = np.asarray(j)
        return (self.texel(i, j), self.texel(i + 1, j),
                self.texel(i, j + 1), self.texel(i + 1, j + 1))

    def corner_grids(self):
        """Per-cell corner arrays of shape (H, W, 2), indexed [j, i]."""
        t = self.texels
        n1 = np.roll(t, -1, axis=1)
        return t, n1, np.roll(t, -1, axis=0), np.roll(n1, -1, axis=0)


def unproject(n) -> np.ndarray:
    """Lift projected normals to unit 3D vectors with z >= 0."""
    n = np.asarray(n, dtype=np.float64)
    r2 = n[..., 0] ** 2 + n[..., 1] ** 2
    if np.any(r2 > (1.0 + _NORM_TOL) ** 2):
        raise InvalidNormalError("projected normal outside the unit disk")
    scale = np.where(r2 > 1.0, 1.0 / np.sqrt(np.maximum(r2, 1.0)), 1.0)
    xy = n * scale[..., None]
    z = np.sqrt(np.maximum(0.0, 1.0 - r2 * scale ** 2))
    return np.concatenate([xy, z[..., None]], axis=-1)


def barycentric_blend(n0, n1, n2, n3, u, v):
    """Interpolate a cell with corner values n0..n3 at fractional (u, v)."""
    u = np.asarray(u, dtype=np.float64)[..., None]
    v = np.asarray(v, dtype=np.float64)[..., None]
    upper = n0 * (1.0 - u - v) + n1 * u + n2 * v
    lower = n3 * (u + v - 1.0) + n2 * (1.0 - u) + n1 * (1.0 - v)
    return np.where(u + v < 1.0, upper, lower)


def interpolate(field: NormalField, u) -> np.ndarray:
    """Piecewise-linear normal at texture coordinates ``u[..., 2]``."""
    u = np.asarray(u, dtype=np.float64)
    base = np.floor(u)
    frac = u - base
    i = base[..., 0].astype(np.int64)
    j = base[..., 1].astype(np.int64)
    n0, n1, n2, n3 = field.corners(i, j)
    return barycentric_blend(n0, n1, n2, n3, frac[..., 0], frac[..., 1])


def triangle(field: NormalField, cell: CellId) -> NormalTriangle:
    i, j, half = cell
    n0, n1, n2, n3 = field.corners(i, j)
    if half == UPPER:
        spatial = [(i, j), (i + 1, j), (i, j + 1)]
        normals = [n0, n1, n2]
    elif half == LOWER:
        spatial = [(i + 1, j + 1), (i, j + 1), (i + 1, j)]
        normals = [n3, n2, n1]
    else:
        raise ValueError(f"unknown cell half {half!r}")
    return NormalTriangle.from_vertices(spatial, normals)


def jacobian_det(field: NormalField, cell: CellId) -> float:
    """Unclamped |det J| of the interpolation on one cell half."""
    i, j, half = cell
    n0, n1, n2, n3 = field.corners(i, j)
    if half == UPPER:
        return float(abs(cross2(n2 - n0, n1 - n0)))
    return float(abs(cross2(n2 - n3, n1 - n3)))


def cell_jacobians(field: NormalField):
    """Unclamped Jacobians of all upper and lower halves, each shaped (H, W)."""
    n0, n1, n2, n3 = field.corner_grids()
    return np.abs(cross2(n2 - n0, n1 - n0)), np.abs(cross2(n2 - n3, n1 - n3))
