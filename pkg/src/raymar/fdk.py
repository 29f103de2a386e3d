"""Feldkamp (FDK) filtered backprojection for the circular cone-beam orbit."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .volume import ConeBeamGeometry, Sinogram, Volume3D

WINDOWS = ("ramlak", "shepplogan")


@dataclass(frozen=True, eq=False)
class RampFilter:
    """Discrete spatial-domain ramp kernel for row-wise FFT convolution.

    ``taps`` holds the kernel in circular order: ``taps[k]`` is the coefficient
    for offset ``k`` and ``taps[-k]`` for ``-k``.  ``spacing`` is the sample
    pitch the kernel was built for.
    """

    taps: np.ndarray
    window: str
    padded_len: int
    spacing: float

    @classmethod
    def build(cls, n_bins: int, spacing: float, window: str = "shepplogan") -> "RampFilter":
        if window not in WINDOWS:
            raise ValueError(f"unknown window {window!r}, expected one of {WINDOWS}")
        padded = 1 << int(np.ceil(np.log2(max(2 * n_bins, 2))))
        k = np.arange(padded)
        k = np.where(k < padded // 2, k, k - padded).astype(float)
        tau2 = spacing * spacing
        if window == "ramlak":
            taps = np.zeros(padded)
            taps[0] = 1.0 / (4.0 * tau2)
            odd = (k.astype(int) % 2) != 0
            taps[odd] = -1.0 / (np.pi**2 * k[odd] ** 2 * tau2)
        else:
            taps = -2.0 / (np.pi**2 * tau2 * (4.0 * k**2 - 1.0))
        taps.setflags(write=False)
        return cls(taps, window, padded, float(spacing))

    def tap(self, offset: int) -> float:
        return float(self.taps[offset % self.padded_len])

    @property
    def response(self) -> np.ndarray:
        """Real frequency response used for the circular convolution."""
        return np.fft.rfft(self.taps).real


def ramp_filter_for(geom: ConeBeamGeometry, window: str = "shepplogan") -> RampFilter:
    """Ramp filter sampled at the detector pitch scaled back to the isocenter."""
    return RampFilter.build(geom.det_bins[0], geom.du * geom.sad / geom.sdd, window)


def cosine_weights(geom: ConeBeamGeometry) -> np.ndarray:
    """``sdd / sqrt(sdd^2 + u^2 + v^2)`` per detector bin, shape ``(nv, nu)``."""
    u = geom.u_coords()[None, :]
    v = geom.v_coords()[:, None]
    return geom.sdd / np.sqrt(geom.sdd**2 + u**2 + v**2)


def filter_rows(sino: Sinogram, f: RampFilter) -> Sinogram:
    """Cosine-weight every view, then convolve each detector row with the ramp kernel.

    The convolution is a plain tap sum (no pitch factor): a unit impulse comes
    back as the kernel taps.
    """
    nu = sino.geometry.det_bins[0]
    if f.padded_len < 2 * nu:
        raise ValueError(f"filter length {f.padded_len} too short for {nu} detector bins")
    weighted = sino.data * cosine_weights(sino.geometry)[None, :, :]
    spec = np.fft.rfft(weighted, n=f.padded_len, axis=-1)
    spec *= np.fft.rfft(f.taps)[None, None, :]
    out = np.fft.irfft(spec, n=f.padded_len, axis=-1)[..., :nu]
    return Sinogram(sino.geometry, np.ascontiguousarray(out))


def angular_weights(angles: np.ndarray) -> np.ndarray:
    """Per-view angular step for a full orbit (central differences, wrapped at 2*pi)."""
    n = len(angles)
    nxt = np.roll(angles, -1)
    nxt[-1] += 2 * np.pi
    prv = np.roll(angles, 1)
    prv[0] -= 2 * np.pi
    return 0.5 * (nxt - prv) if n > 1 else np.array([2 * np.pi])


@numba.njit(cache=True, parallel=True, fastmath=True)
def _backproject(q, cosb, sinb, dbeta, sad, sdd, du, dv, xs, ys, zs, out):
    n_views, nv, nu = q.shape
    cu = 0.5 * (nu - 1)
    cv = 0.5 * (nv - 1)
    nz, ny, nx = out.shape
    for k in numba.prange(nz):
        z = zs[k]
        for b in range(n_views):
            c = cosb[b]
            s = sinb[b]
            img = q[b]
            wb = dbeta[b]
            for j in range(ny):
                y = ys[j]
                for i in range(nx):
                    x = xs[i]
                    big_u = sad - (x * c + y * s)
                    mag = sdd / big_u
                    fu = (y * c - x * s) * mag / du + cu
                    fv = z * mag / dv + cv
                    if fu < -0.5 or fu > nu - 0.5 or fv < -0.5 or fv > nv - 0.5:
                        continue
                    fu = min(max(fu, 0.0), nu - 1.0)
                    fv = min(max(fv, 0.0), nv - 1.0)
                    iu = min(int(fu), max(nu - 2, 0))
                    iv = min(int(fv), max(nv - 2, 0))
                    au = fu - iu
                    av = fv - iv
                    iu1 = min(iu + 1, nu - 1)
                    iv1 = min(iv + 1, nv - 1)
                    val = (
                        (img[iv, iu] * (1 - au) + img[iv, iu1] * au) * (1 - av)
                        + (img[iv1, iu] * (1 - au) + img[iv1, iu1] * au) * av
                    )
                    w = sad / big_u
                    out[k, j, i] += wb * w * w * val


def grid(dims, spacing, origin=None) -> Volume3D:
    """Empty output grid descriptor."""
    return Volume3D.zeros(dims, spacing, origin)


def fdk_reconstruct(sino: Sinogram, out_grid: Volume3D, window: str = "shepplogan",
                    ramp: RampFilter | None = None) -> Volume3D:
    """Reconstruct ``sino`` onto the grid of ``out_grid`` (its values are ignored).

    Views are cosine weighted and ramp filtered along u, then backprojected
    voxel by voxel with bilinear detector interpolation and the distance
    weight ``sad^2 / U^2``, ``U`` being the voxel depth along the central ray.
    """
    geom = sino.geometry
    if geom.n_views < 2:
        raise ValueError("FDK needs at least two views")
    span = geom.angles[-1] - geom.angles[0]
    mean_step = span / (geom.n_views - 1)
    if abs(span + mean_step - 2 * np.pi) > 1.01 * mean_step:
        raise ValueError("FDK here needs views covering a full 2*pi orbit")
    if ramp is None:
        ramp = ramp_filter_for(geom, window)
    elif not np.isclose(ramp.spacing, geom.du * geom.sad / geom.sdd):
        raise ValueError("ramp filter pitch does not match the detector geometry")
    q = filter_rows(sino, ramp).data
    ox, oy, oz = out_grid.origin
    sx, sy, sz = out_grid.spacing
    nx, ny, nz = out_grid.dims
    xs = ox + sx * np.arange(nx)
    ys = oy + sy * np.arange(ny)
    zs = oz + sz * np.arange(nz)
    out = np.zeros((nz, ny, nx))
    _backproject(
        q, np.cos(geom.angles), np.sin(geom.angles), angular_weights(geom.angles),
        geom.sad, geom.sdd, geom.du, geom.dv, xs, ys, zs, out,
    )
    out *= 0.5 * ramp.spacing
    return Volume3D(out, out_grid.spacing, out_grid.origin)
