"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np
from scipy import integrate

from glint.hierarchy import leaf_weights
from glint.kernels import kernel_eval
from glint.normal_field import interpolate

# 16 x 16 Gauss-Legendre points collapsed onto the unit right triangle: 256 nodes
_g, _gw = np.polynomial.legendre.leggauss(16)
_g = 0.5 * (_g + 1.0)
_gw = 0.5 * _gw
_S, _T = np.meshgrid(_g, _g, indexing="ij")
QUAD_S = (_S * (1.0 - _T)).ravel()
QUAD_T = _T.ravel()
QUAD_W = (np.outer(_gw, _gw) * (1.0 - _T)).ravel()


def cluster_normal(v, a, u):
    """Cluster interpolation at node-local texture coordinates u (..., 2)."""
    s = u[..., 0:1] / a
    t = u[..., 1:2] / a
    upper = v[0] * (1 - s - t) + v[1] * s + v[2] * t
    lower = v[3] * (s + t - 1) + v[2] * (1 - s) + v[1] * (1 - t)
    return np.where(s + t < 1, upper, lower)


def quadrature_objective(field, level, cell, v, eps=1e-6):
    """Inverse-Jacobian weighted misfit integrated with 256 points per leaf triangle."""
    a = 1 << level
    I, J = cell
    w_up, w_lo = leaf_weights(field, eps)
    j, i = np.mgrid[0:a, 0:a]
    gi, gj = (I * a + i.ravel()) % field.width, (J * a + j.ravel()) % field.height
    total = 0.0
    for lower, w in ((False, w_up[gj, gi]), (True, w_lo[gj, gi])):
        s, t = (1 - QUAD_S, 1 - QUAD_T) if lower else (QUAD_S, QUAD_T)
        loc = np.stack([i.ravel()[:, None] + s, j.ravel()[:, None] + t], axis=-1)
        # nudge off the shared diagonal so each side uses its own triangle
        loc += (1e-12 if lower else -1e-12)
        diff = cluster_normal(v, a, loc) - interpolate(field, loc + [I * a, J * a])
        total += float(np.sum(w[:, None] * QUAD_W * np.sum(diff ** 2, axis=-1)))
    return total


def binning_oracle(field, q, n, grid, rng, chunk=1 << 20):
    """Histogram density of n(u) with u drawn from the kernel by rejection from its bounding box.

    Returns (density image with row 0 at m_y = +1, counts).
    """
    lo = np.asarray(q.x) - np.asarray(q.r)
    span = 2.0 * np.asarray(q.r)
    peak = float(kernel_eval(q, np.asarray(q.x)))
    edges = np.linspace(-1.0, 1.0, grid + 1)
    counts = np.zeros((grid, grid))
    done = 0
    while done < n:
        u = lo + span * rng.random((chunk, 2))
        u = u[rng.random(chunk) * peak < kernel_eval(q, u)][: n - done]
        m = interpolate(field, u)
        counts += np.histogram2d(m[:, 1], m[:, 0], bins=(edges, edges))[0][::-1]
        done += len(u)
    h = 2.0 / grid
    return counts / (n * h * h), counts


def random_disk_triangles(rng, n, radius=0.95):
    r = radius * np.sqrt(rng.random((n, 3)))
    phi = 2 * np.pi * rng.random((n, 3))
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def visible_area_quad(tri, omega):
    """Nested 1D quadrature of (w_x m_x / m_z + w_z) over the visible part (canonical frame)."""
    wx, wz = omega[0], omega[2]
    v = tri
    ys = np.sort(v[:, 1])

    def span(y):
        xs = []
        for k in range(3):
            p, q = v[k], v[(k + 1) % 3]
            if (p[1] - y) * (q[1] - y) <= 0 and p[1] != q[1]:
                xs.append(p[0] + (y - p[1]) / (q[1] - p[1]) * (q[0] - p[0]))
        return (min(xs), max(xs)) if xs else (0.0, 0.0)

    def inner(y):
        a, b = span(y)
        a = max(a, -wz * math.sqrt(max(0.0, 1 - y * y)))
        if b <= a:
            return 0.0
        f = lambda x: wx * x / math.sqrt(max(1e-300, 1 - x * x - y * y)) + wz
        return integrate.quad(f, a, b, epsabs=1e-12, epsrel=1e-12, limit=200)[0]

    return integrate.quad(inner, ys[0], ys[2], points=[ys[1]], epsabs=1e-11, epsrel=1e-11,
                          limit=200)[0]


def shoelace(poly) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def visible_region_polygon(omega_z: float, n: int = 100_000) -> np.ndarray:
    """Fine counterclockwise polygon of the visible set: right half disk plus left half ellipse."""
    phi = 2 * np.pi * (np.arange(n) + 0.5) / n
    x, y = np.cos(phi), np.sin(phi)
    return np.stack([np.where(x < 0, omega_z * x, x), y], axis=-1)


def clip_polygon_to_triangle(poly, tri) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by the three half-planes of a ccw triangle."""
    if shoelace(tri) < 0:
        tri = tri[::-1]
    for k in range(3):
        a, b = tri[k], tri[(k + 1) % 3]
        d = b - a
        side = d[0] * (poly[:, 1] - a[1]) - d[1] * (poly[:, 0] - a[0])
        nxt = np.roll(poly, -1, axis=0)
        sn = np.roll(side, -1)
        inside = side >= 0
        cross = (side >= 0) != (sn >= 0)
        t = side / np.where(cross, side - sn, 1.0)
        hit = poly + t[:, None] * (nxt - poly)
        pts = np.stack([poly, hit], axis=1).reshape(-1, 2)
        poly = pts[np.stack([inside, cross], axis=1).ravel()]
        if len(poly) == 0:
            return poly
    return poly
