import numpy as np
import pytest

from conftest import ball
from raymar.fdk import RampFilter, cosine_weights, fdk_reconstruct, filter_rows, grid, ramp_filter_for
from raymar.projector import forward_project
from raymar.volume import ConeBeamGeometry, RigidTransform, Sinogram, Volume3D, resample_rigid


def test_ramlak_taps_closed_form():
    f = RampFilter.build(32, 0.7, "ramlak")
    assert f.padded_len == 64
    assert f.tap(0) == pytest.approx(1 / (4 * 0.49))
    for k in range(1, 20):
        expected = 0.0 if k % 2 == 0 else -1 / (np.pi**2 * k**2 * 0.49)
        assert f.tap(k) == pytest.approx(expected, abs=1e-15)
        assert f.tap(-k) == f.tap(k)


def test_shepplogan_symmetric():
    f = RampFilter.build(40, 1.3)
    for k in range(1, 30):
        assert f.tap(k) == f.tap(-k)
    assert f.padded_len >= 80 and f.padded_len & (f.padded_len - 1) == 0


def test_unknown_window():
    with pytest.raises(ValueError):
        RampFilter.build(8, 1.0, "hann")


def test_filter_rows_delta_returns_taps():
    g = ConeBeamGeometry(500.0, 1000.0, (33, 3), (33.0, 3.0), n_views=2)
    f = RampFilter.build(33, 0.5, "ramlak")
    data = np.zeros(g.shape)
    data[0, 1, 16] = 1.0 / cosine_weights(g)[1, 16]
    out = filter_rows(Sinogram(g, data), f).data[0, 1]
    for i in range(33):
        assert out[i] == pytest.approx(f.tap(i - 16), abs=1e-12)


def test_filter_rows_zero():
    g = ConeBeamGeometry(500.0, 1000.0, (16, 4), (16.0, 4.0), n_views=3)
    assert not filter_rows(Sinogram(g, np.zeros(g.shape)), ramp_filter_for(g)).data.any()


def test_filter_rows_constant_row_against_direct_convolution():
    # inside a long row the ramp kernel almost annihilates DC; compare to a direct tap sum
    nu = 257
    g = ConeBeamGeometry(500.0, 1000.0, (nu, 1), (nu * 0.1, 0.1), n_views=2)
    f = RampFilter.build(nu, 0.1, "ramlak")
    data = np.ones(g.shape) / cosine_weights(g)[None]
    out = filter_rows(Sinogram(g, data), f).data[0, 0]
    direct = np.array([sum(f.tap(i - j) for j in range(nu)) for i in range(nu)])
    np.testing.assert_allclose(out, direct, atol=1e-9 * abs(f.tap(0)))
    center = out[nu // 2 - 8: nu // 2 + 8]
    # residual DC response falls as 1/distance to the row ends
    assert np.max(np.abs(center)) < 0.01 * f.tap(0)


def test_zero_sinogram_gives_zero_volume(small_geom):
    out = fdk_reconstruct(Sinogram(small_geom, np.zeros(small_geom.shape)), grid((8, 8, 8), (2, 2, 2)))
    assert not out.data.any()


def test_fdk_rejects_partial_orbit():
    g = ConeBeamGeometry(500.0, 1000.0, (16, 4), (40.0, 10.0), angles=np.linspace(0, np.pi, 10))
    with pytest.raises(ValueError):
        fdk_reconstruct(Sinogram(g, np.zeros(g.shape)), grid((4, 4, 4), (1, 1, 1)))


def test_output_grid_shape_configurable(small_geom):
    out = fdk_reconstruct(Sinogram(small_geom, np.zeros(small_geom.shape)), grid((20, 16, 6), (0.415, 0.415, 0.83)))
    assert out.dims == (20, 16, 6)
    assert out.spacing == (0.415, 0.415, 0.83)


@pytest.fixture(scope="module")
def ball_recon(small_geom):
    truth = ball((48, 48, 48), (1.0, 1.0, 1.0), 16.0, 0.02)
    sino = forward_project(truth, small_geom)
    return truth, sino, fdk_reconstruct(sino, truth)


def test_ball_round_trip(ball_recon):
    truth, _, rec = ball_recon
    x, y, z = truth.voxel_centers()
    inner = x**2 + y**2 + z**2 <= 12.0**2
    assert abs(rec.data[inner].mean() - 0.02) < 0.05 * 0.02
    mid = truth.data.shape[0] // 2
    sl = inner[mid]
    rmse = np.sqrt(np.mean((rec.data[mid][sl] - truth.data[mid][sl]) ** 2))
    assert rmse < 0.1 * 0.02


def test_fdk_linearity(ball_recon, small_geom, rng):
    truth, sino, rec = ball_recon
    other = Sinogram(small_geom, rng.random(small_geom.shape))
    rec_other = fdk_reconstruct(other, truth)
    combo = fdk_reconstruct(Sinogram(small_geom, 2 * sino.data - 3 * other.data), truth)
    ref = 2 * rec.data - 3 * rec_other.data
    assert np.max(np.abs(combo.data - ref)) <= 1e-6 * np.max(np.abs(ref))


def test_view_shift_rotates_reconstruction(small_geom):
    v = Volume3D.zeros((40, 40, 40), (1.0, 1.0, 1.0))
    x, y, z = v.voxel_centers()
    smooth = v.with_data(0.02 * np.exp(-((x - 6) ** 2 / 60 + (y + 3) ** 2 / 25 + z**2 / 80)))
    sino = forward_project(smooth, small_geom)
    rec = fdk_reconstruct(sino, smooth)
    rolled = fdk_reconstruct(Sinogram(small_geom, np.roll(sino.data, 1, axis=0)), smooth)
    step = 2 * np.pi / small_geom.n_views
    rotated = resample_rigid(rec, RigidTransform(r=(0.0, 0.0, step)), rec)
    inner = (slice(6, -6),) * 3
    err = np.sqrt(np.mean((rolled.data[inner] - rotated.data[inner]) ** 2))
    assert err < 0.02 * smooth.data.max()
