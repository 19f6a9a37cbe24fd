"""Position-normal distribution of a footprint: exact evaluation and sampling.

The density at a projected normal ``m`` sums, over every normal triangle that
contains ``m``, the kernel value at the matching spatial point divided by the
triangle's Jacobian. Triangles whose Jacobian falls below ``epsilon`` are
replaced by a small equilateral triangle of area ``epsilon / 2`` (Jacobian
exactly ``epsilon`` for a unit cell) centered at the cell-center normal, so the density stays bounded and every
triangle still carries its full kernel mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import (DEFAULT_TAU, ClusterHierarchy, Cut, cut_aabbs, cut_corners, leaf_cut,
                        node_triangles, select_cut)
from .kernels import FootprintQuery, kernel_eval, kernel_sample
from .normal_field import NormalField, NormalTriangle, cross2, signed_area
from .trigeom import BARY_TOL, barycentric, eqtri_vertices, eqtri_warp, inside

__all__ = [
    "ClampPolicy", "PndfValue", "FootprintNDF", "intersect_normal_triangle",
    "effective_triangle", "eqtri_warp", "eval_pndf", "sample_pndf", "pndf_bin_oracle",
    "disk_bin_centers", "histogram_disk", "DomainError",
]

_PAIR_BUDGET = 1 << 21


class DomainError(ValueError):
    """Query outside the domain of the function (e.g. |m| > 1)."""


@dataclass(frozen=True)
class ClampPolicy:
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class PndfValue:
    density: float
    intersection_count: int
    candidate_count: int = 0


def intersect_normal_triangle(m, t: NormalTriangle, tol: float = BARY_TOL):
    """Barycentrics of ``m`` in the normal triangle, or None when outside."""
    lam, area2 = barycentric(np.asarray(m, dtype=np.float64), t.normals)
    if area2 == 0 or not inside(lam, tol):
        return None
    return tuple(float(x) for x in lam)


def effective_triangle(t: NormalTriangle, policy: ClampPolicy = ClampPolicy()) -> NormalTriangle:
    """The triangle itself, or its equilateral stand-in when the Jacobian is below epsilon.

    Works for unit cells and cluster cells alike: the stand-in has area
    ``epsilon / 2`` and is centered at the midpoint of the diagonal shared by
    the cell's two triangles (the cell-center normal).
    """
    if t.jacobian >= policy.epsilon:
        return t
    center = 0.5 * (t.normals[1] + t.normals[2])
    verts = center + eqtri_vertices(0.5 * policy.epsilon)
    return NormalTriangle.from_vertices(t.spatial, verts)


# --------------------------------------------------------------------------
# Normal-space grids
# --------------------------------------------------------------------------

def disk_bin_centers(grid: int):
    """Centers of a ``grid x grid`` partition of [-1, 1]^2.

    Row 0 is the top (y = +1), matching image layout. Returns (x, y) 1D arrays
    of column and row centers.
    """
    h = 2.0 / grid
    x = -1.0 + (np.arange(grid) + 0.5) * h
    return x, x[::-1].copy()


def histogram_disk(m, grid: int) -> np.ndarray:
    """Counts of projected normals in the bins of :func:`disk_bin_centers`."""
    m = np.asarray(m, dtype=np.float64).reshape(-1, 2)
    h = 2.0 / grid
    ix = np.clip(np.floor((m[:, 0] + 1.0) / h).astype(np.int64), 0, grid - 1)
    ky = np.clip(np.floor((m[:, 1] + 1.0) / h).astype(np.int64), 0, grid - 1)
    counts = np.bincount((grid - 1 - ky) * grid + ix, minlength=grid * grid)
    return counts.reshape(grid, grid).astype(np.float64)


# --------------------------------------------------------------------------
# Footprint evaluator
# --------------------------------------------------------------------------

class FootprintNDF:
    """The P-NDF of one footprint, prepared for repeated evaluation and sampling.

    Triangles come from the hierarchy cut when ``hier`` is given and from all
    leaf cells overlapping the kernel support otherwise. Triangle ``2k`` is the
    upper and ``2k + 1`` the lower half of cut node ``k``.
    """

    def __init__(self, field: NormalField, q: FootprintQuery, hier: ClusterHierarchy | None = None,
                 tau: float = DEFAULT_TAU, policy: ClampPolicy = ClampPolicy()):
        self.field = field
        self.q = q
        self.hier = hier
        self.policy = policy
        self.cut: Cut = select_cut(hier, q, tau) if hier is not None else leaf_cut(q)
        corners = cut_corners(field, hier, self.cut)
        spatial, normals = node_triangles(corners, self.cut.levels, self.cut.I, self.cut.J)
        k = len(self.cut)
        self.spatial = spatial.reshape(2 * k, 3, 2)
        raw = normals.reshape(2 * k, 3, 2)
        self.node_size = np.repeat((1 << self.cut.levels).astype(np.float64), 2)
        sp_area = 0.5 * self.node_size ** 2
        self.jacobian = np.abs(signed_area(raw)) / sp_area
        eps = policy.epsilon
        self.clamped = self.jacobian < eps
        # stand-ins keep the leaf area eps / 2 at every level, so a clamped
        # cluster spreads its mass exactly like its stacked clamped leaves
        self.inv_jacobian = np.where(self.clamped, sp_area / (0.5 * eps),
                                     1.0 / np.maximum(self.jacobian, eps))
        self.normals = raw.copy()
        if np.any(self.clamped):
            c = self.clamped
            center = 0.5 * (raw[c, 1] + raw[c, 2])
            self.normals[c] = center[:, None, :] + eqtri_vertices(0.5 * eps)
        self._affine_maps()
        pad = 1e-12 + 1e-8 * (self.normals.max(axis=1) - self.normals.min(axis=1))
        self.lo = self.normals.min(axis=1) - pad
        self.hi = self.normals.max(axis=1) + pad
        if hier is not None and hier.minmax is not None:
            self.node_lo, self.node_hi = cut_aabbs(hier.minmax, self.cut)
        else:
            self.node_lo = np.minimum(self.lo[0::2], self.lo[1::2])
            self.node_hi = np.maximum(self.hi[0::2], self.hi[1::2])
        self._build_lookup()

    def __len__(self) -> int:
        return len(self.spatial)

    # --- evaluation -------------------------------------------------------

    def _check(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64)
        if m.shape[-1] != 2:
            raise ValueError("projected normals must be 2D")
        if np.any(np.hypot(m[..., 0], m[..., 1]) > 1.0 + 1e-12):
            raise DomainError("projected normal outside the unit disk")
        return m

    def _affine_maps(self):
        """Per-triangle affine maps m -> barycentrics (T, 3, 3) and m -> texture point (T, 2, 3)."""
        a, b, c = self.normals[:, 0], self.normals[:, 1], self.normals[:, 2]
        area2 = cross2(b - a, c - a)[:, None]
        l0 = np.stack([b[:, 1] - c[:, 1], c[:, 0] - b[:, 0], cross2(b, c)], axis=-1) / area2
        l1 = np.stack([c[:, 1] - a[:, 1], a[:, 0] - c[:, 0], cross2(c, a)], axis=-1) / area2
        l2 = np.stack([-l0[:, 0] - l1[:, 0], -l0[:, 1] - l1[:, 1], 1.0 - l0[:, 2] - l1[:, 2]], axis=-1)
        self._lam = np.stack([l0, l1, l2], axis=1)
        self._to_uv = np.einsum("tkc,tkj->tcj", self.spatial, self._lam)

    def _accumulate(self, pts, tri):
        """Densities for (point, triangle) candidate pairs; returns (point, value) for hits."""
        L = self._lam[tri]
        x, y = pts[:, 0:1], pts[:, 1:2]
        lam = L[..., 0] * x + L[..., 1] * y + L[..., 2]
        ok = inside(lam)
        tri = tri[ok]
        U = self._to_uv[tri]
        u = U[..., 0] * x[ok] + U[..., 1] * y[ok] + U[..., 2]
        return ok, kernel_eval(self.q, u) * self.inv_jacobian[tri]

    def evaluate(self, m):
        """Densities, hit counts and candidate counts at ``m[..., 2]``."""
        m = self._check(m)
        shape = m.shape[:-1]
        pts = m.reshape(-1, 2)
        n = len(pts)
        dens = np.zeros(n)
        hits = np.zeros(n, dtype=np.int64)
        ntri = max(len(self), 1)
        step = max(1, _PAIR_BUDGET // ntri)
        for s in range(0, n, step):
            p = pts[s:s + step]
            box = np.all((self.lo[None] <= p[:, None]) & (p[:, None] <= self.hi[None]), axis=-1)
            pi, ti = np.nonzero(box)
            ok, val = self._accumulate(p[pi], ti)
            pi = pi[ok]
            dens[s:s + step] = np.bincount(pi, val, minlength=len(p))
            hits[s:s + step] = np.bincount(pi, minlength=len(p))
        return dens.reshape(shape), hits.reshape(shape), self.candidate_count(m)

    def __call__(self, m) -> PndfValue:
        d, h, c = self.evaluate(np.asarray(m, dtype=np.float64).reshape(2))
        return PndfValue(float(d), int(h), int(c))

    def candidate_count(self, m) -> np.ndarray:
        """Cluster triangles surviving min-max pruning (two per cut node)."""
        m = np.asarray(m, dtype=np.float64)
        pts = m.reshape(-1, 2)
        out = np.zeros(len(pts), dtype=np.int64)
        step = max(1, _PAIR_BUDGET // max(len(self.node_lo), 1))
        for s in range(0, len(pts), step):
            p = pts[s:s + step, None, :]
            box = np.all((self.node_lo <= p) & (p <= self.node_hi), axis=-1)
            out[s:s + step] = 2 * box.sum(axis=1)
        return out.reshape(m.shape[:-1])

    def _raster_pairs(self, grid: int, tris: np.ndarray, cover: bool):
        """(triangle, ix, ky) pairs for grid points (cover=False) or bins (cover=True) hit by bboxes."""
        h = 2.0 / grid
        lo = self.lo[tris]
        hi = self.hi[tris]
        if cover:
            i0 = np.floor((lo + 1.0) / h).astype(np.int64)
            i1 = np.floor((hi + 1.0) / h).astype(np.int64)
        else:
            i0 = np.ceil((lo + 1.0) / h - 0.5).astype(np.int64)
            i1 = np.floor((hi + 1.0) / h - 0.5).astype(np.int64)
        i0 = np.clip(i0, 0, grid)
        i1 = np.clip(i1, -1, grid - 1)
        nx = np.maximum(i1[:, 0] - i0[:, 0] + 1, 0)
        ny = np.maximum(i1[:, 1] - i0[:, 1] + 1, 0)
        cnt = nx * ny
        total = int(cnt.sum())
        t = np.repeat(np.arange(len(tris)), cnt)
        off = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ix = i0[t, 0] + off % nx[t]
        ky = i0[t, 1] + off // nx[t]
        return tris[t], ix, ky

    def _tri_chunks(self, grid: int, cover: bool):
        h = 2.0 / grid
        ext = np.minimum((self.hi - self.lo) / h + 2.0, grid + 2)
        cum = np.cumsum(ext[:, 0] * ext[:, 1])
        n = len(self)
        start = 0
        while start < n:
            limit = (cum[start - 1] if start else 0.0) + _PAIR_BUDGET
            end = max(start + 1, int(np.searchsorted(cum, limit, side="right")))
            yield np.arange(start, min(end, n))
            start = end

    def image(self, grid: int, supersample: int = 1) -> np.ndarray:
        """Density on the ``grid x grid`` bin centers of [-1, 1]^2 (row 0 on top).

        With ``supersample > 1`` each bin holds the mean over an s x s subgrid.
        Points outside the unit disk evaluate to zero.
        """
        n = grid * supersample
        h = 2.0 / n
        acc = np.zeros(n * n)
        for tris in self._tri_chunks(n, cover=False):
            tri, ix, ky = self._raster_pairs(n, tris, cover=False)
            pts = np.stack([-1.0 + (ix + 0.5) * h, -1.0 + (ky + 0.5) * h], axis=-1)
            ok, val = self._accumulate(pts, tri)
            idx = ky[ok] * n + ix[ok]
            acc += np.bincount(idx, val, minlength=n * n)
        img = acc.reshape(n, n)[::-1]
        xc = -1.0 + (np.arange(n) + 0.5) * h
        disk = (xc[None, :] ** 2 + xc[::-1, None] ** 2) <= 1.0
        img = np.where(disk, img, 0.0)
        if supersample > 1:
            img = img.reshape(grid, supersample, grid, supersample).mean(axis=(1, 3))
        return img

    def bin_masses(self, grid: int, order: int = 5) -> np.ndarray:
        """Exact probability mass of each normal-space bin (row 0 on top).

        Each normal triangle is intersected with the bins its bounding box
        touches; the piece is pulled back to texture space (the map is affine
        per triangle), clipped to the kernel support and the kernel integrated
        over it with a collapsed Gauss rule. The circular edge of the disk
        kernel is left to the quadrature (mass error around 1e-4).
        """
        h = 2.0 / grid
        out = np.zeros(grid * grid)
        ref, wts = _triangle_rule(order)
        lo_s, hi_s = self.q.lower, self.q.upper
        for tris in self._tri_chunks(grid, cover=True):
            tri, ix, ky = self._raster_pairs(grid, tris, cover=True)
            if len(tri) == 0:
                continue
            sp = self.spatial[tri]
            nv = self.normals[tri]
            # affine map u -> n(u) = n_a + M (u - s_a)
            ds = np.stack([sp[:, 1] - sp[:, 0], sp[:, 2] - sp[:, 0]], axis=-1)
            dn = np.stack([nv[:, 1] - nv[:, 0], nv[:, 2] - nv[:, 0]], axis=-1)
            M = dn @ np.linalg.inv(ds)
            base = nv[:, 0] - np.einsum("pij,pj->pi", M, sp[:, 0])
            poly = np.zeros((len(tri), 3, 2))
            poly[:] = sp
            cnt = np.full(len(tri), 3)
            x0 = -1.0 + ix * h
            y0 = -1.0 + ky * h
            planes = [
                (M[:, 0, 0], M[:, 0, 1], base[:, 0] - x0),
                (-M[:, 0, 0], -M[:, 0, 1], x0 + h - base[:, 0]),
                (M[:, 1, 0], M[:, 1, 1], base[:, 1] - y0),
                (-M[:, 1, 0], -M[:, 1, 1], y0 + h - base[:, 1]),
            ]
            one = np.ones(len(tri))
            zero = np.zeros(len(tri))
            planes += [(one, zero, -lo_s[0] * one), (-one, zero, hi_s[0] * one),
                       (zero, one, -lo_s[1] * one), (zero, -one, hi_s[1] * one)]
            for a, b, c in planes:
                poly, cnt = clip_halfplane(poly, cnt, a, b, c)
            mass = _integrate_polygons(poly, cnt, lambda u: kernel_eval(self.q, u), ref, wts)
            out += np.bincount((grid - 1 - ky) * grid + ix, mass, minlength=grid * grid)
        return out.reshape(grid, grid)

    # --- sampling ---------------------------------------------------------

    def _build_lookup(self):
        self._lookup = {}
        for level in np.unique(self.cut.levels).tolist():
            sel = np.nonzero(self.cut.levels == level)[0]
            I, J = self.cut.I[sel], self.cut.J[sel]
            i0, j0 = int(I.min()), int(J.min())
            span = int(I.max()) - i0 + 1
            keys = (J - j0) * span + (I - i0)
            order = np.argsort(keys)
            self._lookup[level] = (i0, j0, span, int(J.max()) - j0 + 1, keys[order], sel[order])

    def locate(self, u) -> np.ndarray:
        """Cut node index containing each texture point ``u[..., 2]`` (-1 if none)."""
        u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
        node = np.full(len(u), -1, dtype=np.int64)
        for level, (i0, j0, span, rows, keys, idx) in self._lookup.items():
            a = float(1 << level)
            I = np.floor(u[:, 0] / a).astype(np.int64) - i0
            J = np.floor(u[:, 1] / a).astype(np.int64) - j0
            ok = (I >= 0) & (I < span) & (J >= 0) & (J < rows)
            key = J * span + I
            pos = np.clip(np.searchsorted(keys, key), 0, len(keys) - 1)
            hit = ok & (keys[pos] == key)
            node[hit] = idx[pos[hit]]
        return node

    def warp(self, u) -> np.ndarray:
        """Projected normal of texture points through the (effective) cut triangles."""
        u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
        node = self.locate(u)
        if np.any(node < 0):
            raise ValueError("texture point outside the footprint cut")
        a = (1 << self.cut.levels[node]).astype(np.float64)
        origin = np.stack([self.cut.I[node], self.cut.J[node]], axis=-1) * a[:, None]
        f = (u - origin) / a[:, None]
        s, t = f[:, 0], f[:, 1]
        upper = s + t < 1.0
        tri = 2 * node + (~upper)
        lam = np.where(upper[:, None], np.stack([1 - s - t, s, t], axis=-1),
                       np.stack([s + t - 1, 1 - s, 1 - t], axis=-1))
        return np.einsum("pk,pkc->pc", lam, self.normals[tri])

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Draw projected normals with density equal to :meth:`evaluate`."""
        count = 1 if n is None else int(n)
        u = kernel_sample(self.q, rng, count)
        hi = self.q.upper
        u = np.minimum(u, np.nextafter(hi, -np.inf))
        m = self.warp(u)
        return m[0] if n is None else m


# --------------------------------------------------------------------------
# Polygon clipping and quadrature
# --------------------------------------------------------------------------

def clip_halfplane(poly: np.ndarray, cnt: np.ndarray, a, b, c):
    """Clip convex polygons ``poly[P, V, 2]`` (first ``cnt`` vertices valid) to a x + b y + c >= 0."""
    P, V, _ = poly.shape
    if V == 0:
        return poly, cnt
    idx = np.arange(V)
    valid = idx[None, :] < cnt[:, None]
    nxt = (idx[None, :] + 1) % np.maximum(cnt, 1)[:, None]
    p = poly
    q = np.take_along_axis(poly, nxt[..., None], axis=1)
    a = np.asarray(a)[:, None]
    b = np.asarray(b)[:, None]
    c = np.asarray(c)[:, None]
    dp = a * p[..., 0] + b * p[..., 1] + c
    dq = a * q[..., 0] + b * q[..., 1] + c
    pin = dp >= 0
    cross = pin != (dq >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(cross, dp / (dp - dq), 0.0)
    x = p + t[..., None] * (q - p)
    out = np.empty((P, 2 * V, 2))
    out[:, 0::2] = p
    out[:, 1::2] = x
    mask = np.empty((P, 2 * V), dtype=bool)
    mask[:, 0::2] = valid & pin
    mask[:, 1::2] = valid & cross
    new_cnt = mask.sum(axis=1)
    order = np.argsort(~mask, axis=1, kind="stable")
    out = np.take_along_axis(out, order[..., None], axis=1)
    width = int(new_cnt.max()) if P else 0
    return out[:, :width], new_cnt


def _triangle_rule(order: int):
    """Collapsed Gauss-Legendre rule on the unit right triangle; weights sum to 1."""
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    s, t = np.meshgrid(x, x, indexing="ij")
    ws, wt = np.meshgrid(w, w, indexing="ij")
    pts = np.stack([s.ravel(), (t * (1.0 - s)).ravel()], axis=-1)
    wts = (ws * wt * (1.0 - s)).ravel()
    return pts, wts / wts.sum()


def _integrate_polygons(poly, cnt, f, ref, wts) -> np.ndarray:
    """Integral of ``f`` over convex polygons by fan triangulation."""
    P, V, _ = poly.shape
    total = np.zeros(P)
    for k in range(1, V - 1):
        use = cnt >= k + 2
        if not np.any(use):
            break
        v0 = poly[use, 0]
        e1 = poly[use, k] - v0
        e2 = poly[use, k + 1] - v0
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        pts = v0[:, None] + ref[None, :, 0:1] * e1[:, None] + ref[None, :, 1:2] * e2[:, None]
        total[use] += area * (f(pts) @ wts)
    return total


# --------------------------------------------------------------------------
# Functional interface
# --------------------------------------------------------------------------

def eval_pndf(field: NormalField, hier: ClusterHierarchy | None, q: FootprintQuery, m,
              policy: ClampPolicy = ClampPolicy(), tau: float = DEFAULT_TAU) -> PndfValue:
    return FootprintNDF(field, q, hier, tau, policy)(m)


def sample_pndf(field: NormalField, hier: ClusterHierarchy | None, q: FootprintQuery,
                policy: ClampPolicy = ClampPolicy(), rng=None, n: int | None = None,
                tau: float = DEFAULT_TAU) -> np.ndarray:
    rng = np.random.default_rng(rng)
    return FootprintNDF(field, q, hier, tau, policy).sample(rng, n)


def pndf_bin_oracle(field: NormalField, q: FootprintQuery, n_samples: int, grid: int,
                    policy: ClampPolicy = ClampPolicy(), rng=None, chunk: int = 1 << 20):
    """Histogram density of leaf-level samples on the ``grid x grid`` partition of [-1, 1]^2.

    Returns (density image, counts).
    """
    if n_samples < 10_000:
        raise ValueError("the binning oracle needs at least 1e4 samples")
    rng = np.random.default_rng(rng)
    ndf = FootprintNDF(field, q, None, policy=policy)
    counts = np.zeros((grid, grid))
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        counts += histogram_disk(ndf.sample(rng, k), grid)
        done += k
    h = 2.0 / grid
    return counts / (n_samples * h * h), counts
