"""Vectorized triangle helpers shared by evaluation, hierarchy and shadowing."""

from __future__ import annotations

import math

import numpy as np

from .normal_field import cross2

BARY_TOL = 1e-9


def eqtri_circumradius(area):
    """Circumradius of the equilateral triangle with the given area."""
    side = np.sqrt(4.0 * np.asarray(area, dtype=np.float64) / math.sqrt(3.0))
    return side / math.sqrt(3.0)


def eqtri_vertices(area) -> np.ndarray:
    """Equilateral triangle centered at the origin, first vertex toward +y.

    Vertices are counterclockwise; returns shape (..., 3, 2).
    """
    rad = np.asarray(eqtri_circumradius(area))[..., None]
    ang = np.radians([90.0, 210.0, 330.0])
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)


def eqtri_warp(uv, area) -> np.ndarray:
    """Map the unit square onto the origin-centered equilateral triangle of ``area``.

    Points with u + v > 1 are folded by (u, v) -> (1 - u, 1 - v), then the unit
    right triangle (0,0), (1,0), (0,1) is sent affinely onto the triangle's
    vertices in order.
    """
    uv = np.asarray(uv, dtype=np.float64)
    fold = uv.sum(axis=-1) > 1.0
    uv = np.where(fold[..., None], 1.0 - uv, uv)
    verts = eqtri_vertices(area)
    s = uv[..., 0:1]
    t = uv[..., 1:2]
    return verts[..., 0, :] * (1.0 - s - t) + verts[..., 1, :] * s + verts[..., 2, :] * t


def barycentric(m, verts):
    """Signed-area-ratio barycentrics of points ``m[..., 2]`` in ``verts[..., 3, 2]``.

    Returns (lambda, twice_area); lambda has shape (..., 3).
    """
    a = verts[..., 0, :]
    b = verts[..., 1, :]
    c = verts[..., 2, :]
    area2 = cross2(b - a, c - a)
    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = cross2(b - m, c - m) / area2
        l1 = cross2(m - a, c - a) / area2
    l2 = 1.0 - l0 - l1
    return np.stack([l0, l1, l2], axis=-1), area2


def inside(lam, tol: float = BARY_TOL):
    return np.all((lam >= -tol) & (lam <= 1.0 + tol), axis=-1)
