import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glint import fields
from glint.kernels import BOX, GAUSSIAN, FootprintQuery, kernel_eval, peak_density, support_cells
from glint.normal_field import LOWER, UPPER, CellId, interpolate, triangle
from glint.pndf import (ClampPolicy, DomainError, FootprintNDF, disk_bin_centers, effective_triangle,
                        eval_pndf, histogram_disk, intersect_normal_triangle, sample_pndf)
from glint.trigeom import eqtri_vertices

MATRIX = np.array([[0.004, 0.001], [-0.002, 0.003]])
OFFSET = np.array([-0.1, -0.05])


def brute_density(field, q, m, policy=ClampPolicy()):
    """Per-triangle loop over the support; independent of the vectorized evaluator."""
    i0, i1, j0, j1 = support_cells(q)
    total = 0.0
    for j in range(j0, j1):
        for i in range(i0, i1):
            for half in (UPPER, LOWER):
                t = effective_triangle(triangle(field, CellId(i, j, half)), policy)
                lam = intersect_normal_triangle(m, t)
                if lam is None:
                    continue
                u = np.asarray(lam) @ t.spatial
                total += float(kernel_eval(q, u)) / max(t.jacobian, policy.epsilon)
    return total


@pytest.mark.parametrize("kind", [BOX, GAUSSIAN])
def test_affine_field_matches_change_of_variables(kind, rng):
    f = fields.affine(32, matrix=((0.004, 0.001), (-0.002, 0.003)))
    q = FootprintQuery((12.3, 14.7), (4.0, 3.0), kind)
    u = q.x + (rng.random((50, 2)) * 1.8 - 0.9) * q.r
    m = OFFSET + u @ MATRIX.T
    expect = kernel_eval(q, u) / abs(np.linalg.det(MATRIX))
    got, hits, _ = FootprintNDF(f, q).evaluate(m)
    assert np.all(hits >= 1)
    # points on a shared edge are counted by both triangles
    assert np.allclose(got, expect * hits, rtol=1e-9)
    once = hits == 1
    assert once.sum() > 40 and np.allclose(got[once], expect[once], rtol=1e-9)


def test_vectorized_matches_triangle_loop(iso64, rng):
    q = FootprintQuery((20.4, 33.1), (3.0, 2.5), GAUSSIAN)
    ndf = FootprintNDF(iso64, q)
    m = np.concatenate([ndf.sample(rng, 20), rng.uniform(-0.4, 0.4, (10, 2))])
    got = ndf.evaluate(m)[0]
    expect = [brute_density(iso64, q, mm) for mm in m]
    assert np.allclose(got, expect, rtol=1e-12, atol=1e-12)


def test_effective_triangle_replaces_degenerate():
    t = triangle(fields.flat(8), CellId(2, 3, UPPER))
    e = effective_triangle(t, ClampPolicy(1e-6))
    assert abs(e.signed_area) == pytest.approx(0.5e-6)
    assert np.allclose(e.normals, eqtri_vertices(0.5e-6))
    assert e.normals[0, 1] > 0 and e.signed_area > 0


def test_flat_field_density_is_stacked_standins():
    f = fields.flat(16)
    q = FootprintQuery((8.0, 8.0), (2.0, 2.0), BOX)
    ndf = FootprintNDF(f, q)
    assert ndf(np.zeros(2)).density == pytest.approx(1.0 / 0.5e-6)
    assert ndf(np.array([0.01, 0.0])).density == 0.0


def test_image_is_evaluation_at_bin_centers(iso64):
    q = FootprintQuery((31.0, 17.5), (4.0, 4.0))
    ndf = FootprintNDF(iso64, q)
    img = ndf.image(48)
    x, y = disk_bin_centers(48)
    pts = np.stack(np.meshgrid(x, y), axis=-1)
    inside = np.hypot(pts[..., 0], pts[..., 1]) <= 1.0
    dens = np.zeros((48, 48))
    dens[inside] = ndf.evaluate(pts[inside])[0]
    assert np.allclose(img, dens, rtol=1e-12, atol=1e-12)


def test_bin_masses_sum_to_one(iso64):
    for kind, tol in (("gaussian", 1e-9), ("box", 1e-12), ("disk", 1e-3)):
        q = FootprintQuery((10.3, 40.8), (5.0, 3.0), kind)
        assert FootprintNDF(iso64, q).bin_masses(32).sum() == pytest.approx(1.0, abs=tol)


def test_samples_follow_evaluation(iso64):
    from scipy.stats import chisquare
    q = FootprintQuery((40.2, 12.9), (6.0, 6.0))
    ndf = FootprintNDF(iso64, q)
    m = ndf.sample(np.random.default_rng(5), 200_000)
    assert np.all(np.hypot(m[:, 0], m[:, 1]) <= 1.0)
    exp = ndf.bin_masses(24).ravel() * len(m)
    obs = histogram_disk(m, 24).ravel()
    keep = exp >= 5
    ob = np.append(obs[keep], obs[~keep].sum())
    ex = np.append(exp[keep], exp[~keep].sum())
    assert chisquare(ob, ex * ob.sum() / ex.sum()).pvalue > 0.01


def test_sampling_is_the_kernel_pushforward(iso64):
    q = FootprintQuery((40.2, 12.9), (6.0, 6.0), BOX)
    ndf = FootprintNDF(iso64, q)
    pts = q.lower + np.array([[0.25, 0.6], [0.9, 0.05], [0.5, 0.5]]) * 2 * np.array(q.r)
    # no clamped leaves here, so warping is plain interpolation at the kernel point
    assert not ndf.clamped.any()
    assert np.allclose(ndf.warp(pts), interpolate(iso64, pts), atol=1e-12)


def test_domain_error():
    ndf = FootprintNDF(fields.flat(8), FootprintQuery((4, 4), (1, 1)))
    with pytest.raises(DomainError):
        ndf.evaluate(np.array([0.9, 0.9]))


def test_wrappers_and_counts(iso64, iso64_hier, rng):
    q = FootprintQuery((20.0, 20.0), (12.0, 12.0))
    m = sample_pndf(iso64, None, q, rng=rng, n=1)
    v = eval_pndf(iso64, None, q, m)
    assert v.density > 0 and v.intersection_count >= 1
    assert v.candidate_count >= v.intersection_count
    vh = eval_pndf(iso64, iso64_hier, q, m, tau=1e-3)
    assert vh.candidate_count >= vh.intersection_count


def test_histogram_orientation():
    counts = histogram_disk(np.array([[0.5, 0.9], [-0.9, -0.9]]), 4)
    assert counts[0, 3] == 1 and counts[3, 0] == 1


@settings(max_examples=40, deadline=None)
@given(st.floats(2, 60), st.floats(2, 60), st.floats(0.5, 8), st.sampled_from(["gaussian", "disk", "box"]),
       st.floats(-0.6, 0.6), st.floats(-0.6, 0.6))
def test_density_nonnegative_and_bounded(x, y, r, kind, mx, my):
    f = fields.isotropic(64, seed=5)
    q = FootprintQuery((x, y), (r, r), kind)
    ndf = FootprintNDF(f, q)
    d = ndf(np.array([mx, my])).density
    assert d >= 0
    assert d <= peak_density(q) * 2.0 / 1e-6 * len(ndf)
