import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raymar.inpaint import (
    InpaintError, InpaintProblem, inpaint_sinogram, inpaint_view, objective, seam_discontinuity,
)
from raymar.metal import MetalShadowMask
from raymar.volume import ConeBeamGeometry, Sinogram


def dense_oracle(orig, corr, region):
    # gradient of the energy written out pixel by pixel, solved directly
    h, w = region.shape
    cells = [(r, c) for r in range(h) for c in range(w) if region[r, c]]
    pos = {cell: n for n, cell in enumerate(cells)}
    a = np.zeros((len(cells), len(cells)))
    b = np.zeros(len(cells))
    for (r, c), n in pos.items():
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if (dr, dc) == (0, 0) or not (0 <= r + dr < h and 0 <= c + dc < w):
                    continue
                q = (r + dr, c + dc)
                if q in pos:
                    # pair appears once as (i, j) and once as (j, i)
                    a[n, n] += 2
                    a[n, pos[q]] -= 2
                    b[n] += 2 * (corr[r, c] - corr[q])
                else:
                    a[n, n] += 1
                    b[n] += orig[q]
    out = orig.copy()
    out[region] = np.linalg.solve(a, b)
    return out


def test_dense_oracle_5x5():
    rng = np.random.default_rng(0)
    for _ in range(20):
        orig = rng.normal(size=(5, 5))
        corr = rng.normal(size=(5, 5))
        region = np.zeros((5, 5), dtype=bool)
        region[1:4, 1:4] = rng.random((3, 3)) < 0.7
        region[2, 2] = True
        want = dense_oracle(orig, corr, region)
        got = inpaint_view(InpaintProblem(orig, corr, region, tol=1e-13))
        np.testing.assert_allclose(got, want, atol=1e-8, rtol=0)
        assert np.array_equal(got[~region], orig[~region])


def test_region_touching_image_edge():
    rng = np.random.default_rng(1)
    orig, corr = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    region = np.zeros((5, 6), dtype=bool)
    region[0:3, 0:2] = True
    got = inpaint_view(InpaintProblem(orig, corr, region, tol=1e-13))
    np.testing.assert_allclose(got, dense_oracle(orig, corr, region), atol=1e-8)


def test_fixed_point_with_constant_ring():
    rng = np.random.default_rng(2)
    orig = rng.normal(size=(9, 9))
    orig[1:8, 1:8] = 3.0  # the ring around the region is constant
    orig[3:6, 3:6] = rng.normal(size=(3, 3))
    region = np.zeros((9, 9), dtype=bool)
    region[2:7, 2:7] = True
    got = inpaint_view(InpaintProblem(orig, orig.copy(), region))
    np.testing.assert_allclose(got, orig, atol=1e-6)


def test_constant_boundary_flat_guide():
    orig = np.full((8, 10), 4.5)
    orig[3:5, 4:7] = -100.0
    corr = np.full((8, 10), 0.25)
    region = np.zeros((8, 10), dtype=bool)
    region[2:6, 3:8] = True
    got = inpaint_view(InpaintProblem(orig, corr, region))
    np.testing.assert_allclose(got[region], 4.5, atol=1e-6)


def test_unanchored_region_is_rejected():
    region = np.ones((4, 4), dtype=bool)
    with pytest.raises(InpaintError):
        inpaint_view(InpaintProblem(np.zeros((4, 4)), np.ones((4, 4)), region))


def test_non_convergence_reports_residual():
    rng = np.random.default_rng(3)
    region = np.zeros((30, 30), dtype=bool)
    region[3:27, 3:27] = True
    with pytest.raises(InpaintError) as info:
        inpaint_view(InpaintProblem(rng.normal(size=(30, 30)), rng.normal(size=(30, 30)), region,
                                    tol=1e-14, max_iter=2))
    assert info.value.residual > 1e-14


def test_problem_validation():
    with pytest.raises(ValueError):
        InpaintProblem(np.zeros((3, 3)), np.zeros((3, 4)), np.ones((3, 3), dtype=bool))
    with pytest.raises(ValueError):
        InpaintProblem(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))


def random_problem(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(4, 12)), int(rng.integers(4, 12))
    region = rng.random((h, w)) < 0.4
    region[0, :] = False  # keeps every component anchored
    if not region.any():
        region[h // 2, w // 2] = True
    return rng.normal(size=(h, w)), rng.normal(size=(h, w)), region


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_energy_and_shift_properties(seed, k):
    orig, corr, region = random_problem(seed)
    p = InpaintProblem(orig, corr, region, tol=1e-12)
    new = inpaint_view(p)
    naive = np.where(region, corr, orig)
    assert objective(new, p) <= objective(naive, p) + 1e-9
    shifted = inpaint_view(InpaintProblem(orig + k, corr + k, region, tol=1e-12))
    np.testing.assert_allclose(shifted[region], new[region] + k, atol=1e-7 * (1 + abs(k)))


def small_geometry():
    return ConeBeamGeometry(500.0, 1000.0, (12, 8), (24.0, 16.0), n_views=3)


def test_inpaint_sinogram_empty_shadow():
    g = small_geometry()
    rng = np.random.default_rng(4)
    orig, corr = Sinogram(g, rng.random(g.shape)), Sinogram(g, rng.random(g.shape))
    out = inpaint_sinogram(orig, corr, MetalShadowMask(g, np.zeros(g.shape, dtype=bool)))
    assert np.array_equal(out.data, orig.data)


def test_inpaint_sinogram_fixed_point():
    g = small_geometry()
    data = np.full(g.shape, 2.0)
    data[:, 3:5, 4:8] = np.random.default_rng(5).random((3, 2, 4))
    mask = np.zeros(g.shape, dtype=bool)
    mask[0, 2:6, 3:9] = True
    mask[2, 1:7, 2:10] = True
    s = Sinogram(g, data)
    out = inpaint_sinogram(s, s, MetalShadowMask(g, mask))
    np.testing.assert_allclose(out.data, data, atol=1e-6)
    assert np.array_equal(out.data[1], data[1])


def test_seam_metric():
    g = small_geometry()
    base = np.tile(np.linspace(0.0, 1.0, 12), (3, 8, 1))
    mask = np.zeros(g.shape, dtype=bool)
    mask[:, 3:5, 4:7] = True
    orig = Sinogram(g, base)
    shadow = MetalShadowMask(g, mask)
    assert seam_discontinuity(orig, orig, shadow) == pytest.approx(1.0 / 11.0)
    bumped = base.copy()
    bumped[1, 3, 4] += 0.5
    assert seam_discontinuity(Sinogram(g, bumped), orig, shadow) == pytest.approx(0.5 + 1.0 / 11.0)
