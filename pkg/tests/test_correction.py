import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raymar.correction import (
    CorrectionParams, ProfileBundle, build_corrected_sinogram, bundle_for_ray, correct_profile,
    distance_transform_1d, lerp, make_bundle,
)
from raymar.metal import MetalShadowMask, metal_shadow
from raymar.projector import RayIndex, RayProfile, forward_project, integrate_profile, ray_for
from raymar.volume import ConeBeamGeometry, Sinogram, Volume3D


def profile(samples, step=0.5):
    return RayProfile(np.asarray(samples, dtype=float), step, np.zeros(3), np.array([1.0, 0.0, 0.0]))


def brute_dt(flags, step):
    idx = [j for j, f in enumerate(flags) if f]
    return [min(abs(i - j) for j in idx) * step if idx else math.inf for i in range(len(flags))]


def hand_correct(noisy, clean, metal, rho, h, trust, cut, step):
    m = [min(max(v, 0.0), rho) for v in metal]
    flags = [v > cut * rho for v in m]
    dt = brute_dt(flags, step)
    out = []
    for i in range(len(noisy)):
        if flags[i]:
            w = m[i] / rho
            out.append(w * rho + (1 - w) * clean[i])
        else:
            w = trust * math.exp(-dt[i] / h)
            out.append(w * clean[i] + (1 - w) * noisy[i])
    return out


def test_lerp():
    assert lerp(2, 4, 0.5) == 3
    assert lerp(1.5, -7.0, 1) == 1.5
    assert lerp(1.5, -7.0, 0) == -7.0


def test_dt_examples():
    np.testing.assert_array_equal(distance_transform_1d([False, False, True, True, False], 1.0), [2, 1, 0, 0, 1])
    np.testing.assert_array_equal(distance_transform_1d([True] * 4, 0.3), 0.0)
    assert np.all(np.isinf(distance_transform_1d([False] * 4, 0.3)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60), st.floats(0.05, 3.0))
def test_dt_matches_brute_force(flags, step):
    np.testing.assert_array_equal(distance_transform_1d(flags, step), brute_dt(flags, step))


def test_params_validation():
    for bad in [dict(rho=0.0), dict(rho=1.0, h=0.0), dict(rho=1.0, prior_trust=0.0),
                dict(rho=1.0, prior_trust=1.5)]:
        with pytest.raises(ValueError):
            CorrectionParams(**bad)


def test_bundle_validation():
    with pytest.raises(ValueError):
        ProfileBundle(profile([1, 2]), profile([1]), profile([0, 0]), np.zeros(2))
    with pytest.raises(ValueError):
        ProfileBundle(profile([1]), profile([1], 0.25), profile([0]), np.zeros(1))


def test_correct_profile_examples():
    p = CorrectionParams(rho=2.0)
    b = make_bundle(profile([5.0]), profile([1.0]), profile([2.0]), 2.0)
    assert correct_profile(b, p).samples[0] == 2.0
    # non-metal sample next to metal (dt forced to 0 through an explicit bundle)
    b = ProfileBundle(profile([2.0]), profile([1.0]), profile([0.0]), np.zeros(1))
    assert correct_profile(b, CorrectionParams(rho=2.0, prior_trust=0.7)).samples[0] == pytest.approx(1.3, rel=1e-15)
    far = ProfileBundle(profile([2.0]), profile([1.0]), profile([0.0]), np.array([200.0]))
    assert abs(correct_profile(far, CorrectionParams(rho=2.0, h=10.0)).samples[0] - 2.0) < 1e-6


def random_bundle(rng):
    n = int(rng.integers(1, 80))
    rho = float(rng.uniform(0.2, 3.0))
    step = float(rng.uniform(0.1, 1.0))
    noisy = rng.normal(0.03, 0.05, n)
    clean = rng.uniform(0.0, 0.1, n)
    metal = np.zeros(n)
    if rng.random() < 0.8:
        a = int(rng.integers(0, n))
        b = int(rng.integers(a, n)) + 1
        metal[a:b] = rho
        # partial-volume edges and resampling overshoot
        metal[max(a - 1, 0)] = rng.uniform(-0.1, 1.0) * rho
        metal[min(b, n - 1)] = rng.uniform(0.0, 1.2) * rho
    p = CorrectionParams(rho, float(rng.uniform(1.0, 20.0)), float(rng.uniform(0.05, 1.0)))
    return noisy, clean, metal, step, p


def test_randomized_bundles_against_hand_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        noisy, clean, metal, step, p = random_bundle(rng)
        b = make_bundle(profile(noisy, step), profile(clean, step), profile(metal, step), p.rho, p.metal_cut)
        got = correct_profile(b, p).samples
        want = hand_correct(list(noisy), list(clean), list(metal), p.rho, p.h, p.prior_trust, p.metal_cut, step)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-300)
        is_metal = np.clip(metal, 0, p.rho) > p.metal_cut * p.rho
        lo, hi = np.minimum(clean, noisy), np.maximum(clean, noisy)
        assert np.all((got[~is_metal] >= lo[~is_metal]) & (got[~is_metal] <= hi[~is_metal]))
        mlo, mhi = np.minimum(clean, p.rho), np.maximum(clean, p.rho)
        assert np.all((got[is_metal] >= mlo[is_metal] - 1e-15) & (got[is_metal] <= mhi[is_metal] + 1e-15))


def test_weight_monotone_in_h():
    rng = np.random.default_rng(1)
    noisy, clean, metal, step, p = random_bundle(rng)
    b = make_bundle(profile(noisy, step), profile(clean, step), profile(metal, step), p.rho)
    w1 = p.prior_trust * np.exp(-b.dt / p.h)
    w2 = p.prior_trust * np.exp(-b.dt / (2 * p.h))
    assert np.all(w2 >= w1)


def test_tiny_prior_trust_is_identity_off_metal():
    b = ProfileBundle(profile([0.3, 0.1, 0.7]), profile([0.9, 0.8, 0.2]), profile([0, 0, 0]), np.zeros(3))
    out = correct_profile(b, CorrectionParams(1.0, prior_trust=1e-300))
    np.testing.assert_array_equal(out.samples, [0.3, 0.1, 0.7])


# --------------------------------------------------------------------------
# sinogram level
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    geom = ConeBeamGeometry(647.7, 1147.7, (61, 21), (170.0, 120.0), n_views=12)
    v = Volume3D.zeros((40, 40, 40), (1.0, 1.0, 1.0))
    x, y, z = v.voxel_centers()
    rng = np.random.default_rng(5)
    unc = v.with_data(0.02 * (x**2 / 400 + y**2 / 300 + z**2 / 500 <= 1) + rng.normal(0, 0.002, v.data.shape))
    prior = v.with_data(0.02 * (x**2 / 400 + y**2 / 300 + z**2 / 500 <= 1))
    rho = 0.6
    metal = v.with_data(np.where((x - 4) ** 2 + y**2 <= 6.0, rho, 0.0) * (np.abs(z) <= 5))
    shadow = metal_shadow(metal, geom)
    return geom, unc, prior, metal, shadow, rho


def test_fixed_point_without_metal(scene):
    geom, unc, _, _, shadow, _ = scene
    zero = unc.with_data(np.zeros(unc.data.shape))
    orig = forward_project(unc, geom, 0.5)
    out = build_corrected_sinogram(orig, unc, unc, zero, shadow, 0.5, CorrectionParams(0.6))
    np.testing.assert_allclose(out.data, orig.data, rtol=1e-9, atol=1e-12)


def test_metal_chord_adds_rho_length(scene):
    geom, _, prior, metal, shadow, rho = scene
    x, y, _ = prior.voxel_centers()
    hollow = prior.with_data(np.where((x - 4) ** 2 + y**2 <= 25.0, 0.0, prior.data))
    orig = forward_project(hollow, geom, 0.5)
    out = build_corrected_sinogram(orig, hollow, hollow, metal, shadow, 0.5, CorrectionParams(rho))
    added = out.data - orig.data
    # every metal sample contributes its value; only samples under the 5% cut are lost
    fp_metal = forward_project(metal, geom, 0.5).data
    sel = shadow.data
    assert np.all(added[sel] <= fp_metal[sel] + 1e-12)
    assert np.all(fp_metal[sel] - added[sel] <= 4 * 0.05 * rho * 0.5)
    assert np.array_equal(out.data[~sel], orig.data[~sel])
    # a ray straight through the rod axis at mid height: rho times the chord
    src = np.array([4.0, -300.0, 0.0])
    det = np.array([4.0, 300.0, 0.0])
    b = bundle_for_ray(hollow, hollow, metal, src, det, 0.05, rho)
    chord = integrate_profile(correct_profile(b, CorrectionParams(rho)))
    assert chord == pytest.approx(rho * 2 * np.sqrt(6.0), rel=0.1)


def test_matches_per_ray_profiles(scene):
    geom, unc, prior, metal, shadow, rho = scene
    p = CorrectionParams(rho, h=8.0, prior_trust=0.7)
    orig = forward_project(unc, geom, 0.5)
    out = build_corrected_sinogram(orig, unc, prior, metal, shadow, 0.5, p)
    views, iv, iu = np.nonzero(shadow.data)
    for n in range(0, len(views), max(len(views) // 40, 1)):
        src, det = ray_for(geom, RayIndex(int(views[n]), int(iu[n]), int(iv[n])))
        b = bundle_for_ray(unc, prior, metal, src, det, 0.5, rho)
        want = integrate_profile(correct_profile(b, p))
        assert out.data[views[n], iv[n], iu[n]] == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_empty_shadow_is_identity(scene):
    geom, unc, prior, metal, _, rho = scene
    orig = Sinogram(geom, np.random.default_rng(0).random(geom.shape))
    empty = MetalShadowMask(geom, np.zeros(geom.shape, dtype=bool))
    out = build_corrected_sinogram(orig, unc, prior, metal, empty, 0.5, CorrectionParams(rho))
    assert np.array_equal(out.data, orig.data)


def test_deterministic(scene):
    geom, unc, prior, metal, shadow, rho = scene
    orig = forward_project(unc, geom, 0.5)
    a = build_corrected_sinogram(orig, unc, prior, metal, shadow, 0.5, CorrectionParams(rho))
    b = build_corrected_sinogram(orig, unc, prior, metal, shadow, 0.5, CorrectionParams(rho))
    assert np.array_equal(a.data, b.data)
