import numpy as np
import pytest

from glint import fields
from glint.hierarchy import (CACHE_MAGIC, CacheError, Cut, assemble_normal_equations,
                             build_hierarchy, cluster_objective, entry_level, leaf_cut, leaf_terms,
                             leaf_weights, load_cache, node_triangles, save_cache, select_cut,
                             solve_cluster_normals)
from glint.kernels import FootprintQuery
from glint.pndf import FootprintNDF
from oracles import quadrature_objective

@pytest.fixture(scope="module")
def rough():
    return fields.isotropic(32, seed=9)


def test_leaf_terms_reassemble(rough):
    eqs = assemble_normal_equations(rough, 2, (1, 3))
    w_up, w_lo = leaf_weights(rough)
    A = np.zeros((4, 4))
    for j in range(4):
        for i in range(4):
            Au, _, Al, _ = leaf_terms(4, i, j)
            A += w_up[12 + j, 4 + i] * Au + w_lo[12 + j, 4 + i] * Al
    assert np.allclose(A, eqs.A, rtol=1e-12)


def test_objective_closed_form_matches_quadrature(rough, rng):
    for level, cell in ((1, (3, 5)), (2, (0, 7)), (3, (2, 1))):
        v = rng.uniform(-0.3, 0.3, (4, 2))
        q = quadrature_objective(rough, level, cell, v)
        assert cluster_objective(rough, level, cell, v) == pytest.approx(q, rel=1e-10)
        eqs = assemble_normal_equations(rough, level, cell)
        quad = 0.5 * np.einsum("kc,kl,lc->", v, eqs.A, v) + np.sum(eqs.B * v) + eqs.C
        assert quad == pytest.approx(q, rel=1e-8)


def test_gradient_matches_finite_differences(rough, rng):
    h = 1e-5
    for _ in range(5):
        level = int(rng.integers(1, 4))
        n = rough.width >> level
        cell = tuple(int(x) for x in rng.integers(0, n, 2))
        eqs = assemble_normal_equations(rough, level, cell)
        v = rng.uniform(-0.3, 0.3, (4, 2))
        fd = np.zeros((4, 2))
        for k in range(4):
            for c in range(2):
                d = np.zeros((4, 2))
                d[k, c] = h
                fd[k, c] = (quadrature_objective(rough, level, cell, v + d)
                            - quadrature_objective(rough, level, cell, v - d)) / (2 * h)
        grad = eqs.A @ v + eqs.B
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4


def test_solution_is_minimum_and_residual_is_root_objective(rough, iso64_hier, rng):
    hier = build_hierarchy(rough)
    for level, cell in ((1, (4, 4)), (3, (1, 2))):
        v = hier.corners(level, *cell)
        eqs = assemble_normal_equations(rough, level, cell)
        assert np.abs(eqs.A @ v + eqs.B).max() < 1e-6 * np.abs(eqs.B).max()
        base = cluster_objective(rough, level, cell, v)
        for _ in range(5):
            assert cluster_objective(rough, level, cell, v + rng.normal(0, 1e-3, (4, 2))) >= base
        assert hier.node_residual(level, *cell) == pytest.approx(np.sqrt(base), rel=1e-9)
    v2, e2 = solve_cluster_normals(eqs.A, eqs.B, eqs.C)
    assert np.allclose(v2, hier.corners(3, 1, 2))
    assert e2 == pytest.approx(hier.node_residual(3, 1, 2), rel=1e-5)


def test_affine_field_is_fit_exactly():
    f = fields.affine(64)
    hier = build_hierarchy(f)
    for level in range(1, hier.depth + 1):
        e = hier.residual[level]
        n = e.shape[0]
        if n > 1:
            # nodes touching the wrap seam see the jump back to the offset
            assert e[: n - 1, : n - 1].max() < 1e-9
    a = 8
    v = hier.corners(3, 2, 1)
    M = np.array([[0.004, 0.001], [-0.002, 0.003]])
    corners = np.array([[2 * a, a], [3 * a, a], [2 * a, 2 * a], [3 * a, 2 * a]], dtype=float)
    assert np.allclose(v, np.array([-0.1, -0.05]) + corners @ M.T, atol=1e-12)


def test_minmax_contains_descendants(iso64, iso64_hier):
    mm = iso64_hier.minmax
    eps = iso64_hier.epsilon
    for level, I, J in ((2, 3, 5), (4, 1, 2), (6, 0, 0)):
        a = 1 << level
        cut = Cut(np.zeros(a * a, dtype=int), np.tile(np.arange(a) + I * a, a),
                  np.repeat(np.arange(a) + J * a, a), 0, 0.0)
        q = FootprintQuery((I * a + a / 2, J * a + a / 2), (a / 2, a / 2), "box")
        ndf = FootprintNDF(iso64, q)
        lo, hi = mm.lo[level][J, I], mm.hi[level][J, I]
        assert np.all(ndf.normals.reshape(-1, 2) >= lo - 1e-12)
        assert np.all(ndf.normals.reshape(-1, 2) <= hi + 1e-12)
        # and every cluster triangle at or below this node
        for sub in range(1, level + 1):
            b = a >> sub
            c = iso64_hier.normals[sub][J * b:(J + 1) * b, I * b:(I + 1) * b]
            assert np.all(c >= lo - 1e-12) and np.all(c <= hi + 1e-12)
        assert len(cut) == a * a and eps > 0


def test_entry_level():
    assert entry_level((16, 16), 8) == 4
    assert entry_level((17, 3), 8) == 5
    assert entry_level((0.3, 0.2), 8) == 0
    assert entry_level((1e6, 1), 6) == 6


@pytest.mark.parametrize("tau", [0.0, 1e-3, 1e-2, 1.0])
def test_cut_tiles_the_support(iso64_hier, tau):
    q = FootprintQuery((30.3, 21.7), (13.0, 9.0))
    cut = select_cut(iso64_hier, q, tau)
    a = 1 << cut.levels
    cover = np.zeros((80, 80), dtype=int)
    for l, i, j, s in zip(cut.levels, cut.I, cut.J, a):
        cover[j * s:(j + 1) * s, i * s:(i + 1) * s] += 1
    assert cover.max() == 1
    leaf = leaf_cut(q)
    assert np.all(cover[leaf.J, leaf.I] == 1)
    order = np.lexsort((cut.I, cut.J, cut.levels))
    assert np.array_equal(order, np.arange(len(cut)))


def test_tau_zero_is_the_leaf_cut(iso64_hier):
    q = FootprintQuery((30.3, 21.7), (13.0, 9.0))
    cut = select_cut(iso64_hier, q, 0.0)
    leaf = leaf_cut(q)
    assert np.array_equal(cut.levels, leaf.levels)
    assert np.array_equal(cut.I, leaf.I) and np.array_equal(cut.J, leaf.J)


def test_negative_tau_rejected(iso64_hier):
    with pytest.raises(ValueError):
        select_cut(iso64_hier, FootprintQuery((1, 1), (1, 1)), -1e-3)


def test_node_triangles_layout():
    corners = np.arange(8, dtype=float).reshape(1, 4, 2)
    sp, nr = node_triangles(corners, [2], [1], [3])
    assert np.allclose(sp[0, 0], [[4, 12], [8, 12], [4, 16]])
    assert np.allclose(sp[0, 1], [[8, 16], [4, 16], [8, 12]])
    assert np.allclose(nr[0, 1], corners[0, [3, 2, 1]])


def test_build_is_deterministic(rough):
    a, b = build_hierarchy(rough), build_hierarchy(rough)
    for x, y in zip(a.normals + a.residual, b.normals + b.residual):
        assert x.tobytes() == y.tobytes()


def test_cache_round_trip(tmp_path, iso64, iso64_hier):
    p1, p2 = tmp_path / "a.pnmh", tmp_path / "b.pnmh"
    save_cache(iso64_hier, p1)
    assert p1.read_bytes().startswith(CACHE_MAGIC)
    loaded = load_cache(p1)
    save_cache(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.epsilon == iso64_hier.epsilon
    for level in range(1, iso64_hier.depth + 1):
        assert np.array_equal(loaded.normals[level], iso64_hier.normals[level].astype(np.float32))
        # stored boxes are rounded outward
        assert np.all(loaded.minmax.lo[level] <= iso64_hier.minmax.lo[level])
        assert np.all(loaded.minmax.hi[level] >= iso64_hier.minmax.hi[level])
    with_field = load_cache(p1, iso64)
    assert np.array_equal(with_field.normals[0], iso64_hier.normals[0])


def test_cache_errors(tmp_path, iso64, iso64_hier):
    good = tmp_path / "c.pnmh"
    save_cache(iso64_hier, good)
    raw = good.read_bytes()
    bad = tmp_path / "bad.pnmh"
    bad.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(CacheError):
        load_cache(bad)
    bad.write_bytes(raw[:-8])
    with pytest.raises(CacheError):
        load_cache(bad)
    version_off = len(CACHE_MAGIC) + 4 + 4 + 8
    bad.write_bytes(raw[:version_off] + (99).to_bytes(4, "little") + raw[version_off + 4:])
    with pytest.raises(CacheError):
        load_cache(bad)
    with pytest.raises(CacheError):
        load_cache(good, fields.isotropic(32))
