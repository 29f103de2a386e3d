import numpy as np
import pytest

from raymar.io import FormatError, read_shadow, read_sinogram, read_volume, write_shadow, write_sinogram, write_volume
from raymar.metal import MetalShadowMask
from raymar.volume import BinaryMask3D, ConeBeamGeometry, Sinogram, Volume3D


def test_volume_round_trip(tmp_path, rng):
    data = rng.normal(size=(5, 6, 7)).astype(np.float32).astype(np.float64)
    vol = Volume3D(data, (0.415, 0.415, 0.83), (-1.2345678901234, 2.0, 1e-3))
    write_volume(tmp_path / "v.hdr", vol)
    back = read_volume(tmp_path / "v")
    assert back.spacing == vol.spacing and back.origin == vol.origin
    assert np.array_equal(back.data, vol.data)


def test_mask_round_trip(tmp_path, rng):
    m = BinaryMask3D(rng.random((4, 3, 2)) < 0.5, (1.0, 2.0, 3.0), (0.5, 0.25, -1.0))
    write_volume(tmp_path / "m.hdr", m)
    back = read_volume(tmp_path / "m.hdr")
    assert isinstance(back, BinaryMask3D)
    assert np.array_equal(back.data, m.data)
    assert "uint8" in (tmp_path / "m.hdr").read_text()


def test_sinogram_and_shadow_round_trip(tmp_path, rng):
    g = ConeBeamGeometry(647.7, 1147.7, (6, 4), (12.3, 8.1), n_views=5)
    s = Sinogram(g, rng.random(g.shape).astype(np.float32).astype(np.float64))
    write_sinogram(tmp_path / "s.hdr", s)
    back = read_sinogram(tmp_path / "s.hdr")
    assert back.geometry == g
    assert np.array_equal(back.data, s.data)
    sh = MetalShadowMask(g, rng.random(g.shape) < 0.3)
    write_shadow(tmp_path / "sh.hdr", sh)
    assert np.array_equal(read_shadow(tmp_path / "sh.hdr").data, sh.data)


def test_format_errors(tmp_path, rng):
    vol = Volume3D(np.zeros((2, 2, 2)), (1, 1, 1))
    write_volume(tmp_path / "v.hdr", vol)
    with pytest.raises(FormatError):
        read_sinogram(tmp_path / "v.hdr")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_volume(tmp_path / "v.hdr")
    (tmp_path / "bad.hdr").write_text("magic RAYMAR-VOL-1\n")
    with pytest.raises(FormatError):
        read_volume(tmp_path / "bad.hdr")
