"""Ray profile correction inside the metal shadow.

Along each shadowed ray the uncorrected (noisy), aligned prior (clean) and
metal-only profiles are sampled on one lattice.  Metal samples blend the
metal attenuation with the prior by metal fraction; the other samples blend
prior and noisy values with a weight that decays with the distance to the
nearest metal sample.  The corrected profile is then integrated back into
the sinogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .metal import MetalShadowMask
from .projector import RayProfile, extract_profile, ray_lattice
from .volume import Sinogram, Volume3D, trilinear_index

METAL_CUT = 0.05


@dataclass(frozen=True)
class CorrectionParams:
    """``rho`` metal attenuation (1/mm), ``h`` weight decay length (mm), ``prior_trust`` in (0, 1]."""

    rho: float
    h: float = 10.0
    prior_trust: float = 0.7
    metal_cut: float = METAL_CUT

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not 0 < self.prior_trust <= 1:
            raise ValueError("prior_trust must lie in (0, 1]")
        if not 0 <= self.metal_cut < 1:
            raise ValueError("metal_cut must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class ProfileBundle:
    """Noisy, clean and metal profiles on one lattice, plus per-sample metal distance ``dt`` (mm)."""

    noisy: RayProfile
    clean: RayProfile
    metal: RayProfile
    dt: np.ndarray

    def __post_init__(self):
        n = len(self.noisy)
        if len(self.clean) != n or len(self.metal) != n or len(self.dt) != n:
            raise ValueError("profiles and dt must have equal length")
        if not (self.noisy.step == self.clean.step == self.metal.step):
            raise ValueError("profiles must share a step")
        if np.any(np.asarray(self.dt) < 0):
            raise ValueError("dt must be non-negative")


def lerp(a, b, w):
    """``w * a + (1 - w) * b``."""
    return w * a + (1 - w) * b


@numba.njit(cache=True)
def _dt_1d(flags, step, out):
    # two sweeps of the distance (in samples) to the closest flagged sample
    n = flags.shape[0]
    last = -1
    for i in range(n):
        if flags[i]:
            last = i
        out[i] = np.inf if last < 0 else (i - last) * step
    last = -1
    for i in range(n - 1, -1, -1):
        if flags[i]:
            last = i
        if last >= 0:
            d = (last - i) * step
            if d < out[i]:
                out[i] = d


def distance_transform_1d(metal_flags, step: float) -> np.ndarray:
    """Distance (mm) from each sample to the nearest flagged sample; ``inf`` when none is flagged."""
    flags = np.asarray(metal_flags, dtype=np.bool_)
    out = np.empty(flags.shape[0])
    _dt_1d(flags, float(step), out)
    return out


def make_bundle(noisy: RayProfile, clean: RayProfile, metal: RayProfile, rho: float,
                metal_cut: float = METAL_CUT) -> ProfileBundle:
    """Bundle three profiles, computing ``dt`` from the metal-membership cut."""
    flags = np.clip(metal.samples, 0.0, rho) > metal_cut * rho
    return ProfileBundle(noisy, clean, metal, distance_transform_1d(flags, noisy.step))


def correct_profile(b: ProfileBundle, p: CorrectionParams) -> RayProfile:
    """Corrected profile on the noisy lattice.

    Metal samples (clamped metal value above ``metal_cut * rho``) become
    ``lerp(rho, clean, metal / rho)``; the others become
    ``lerp(clean, noisy, prior_trust * exp(-dt / h))``.
    """
    m = np.clip(b.metal.samples, 0.0, p.rho)
    is_metal = m > p.metal_cut * p.rho
    w_metal = m / p.rho
    w_prior = p.prior_trust * np.exp(-np.asarray(b.dt) / p.h)
    out = np.where(
        is_metal,
        lerp(p.rho, b.clean.samples, w_metal),
        lerp(b.clean.samples, b.noisy.samples, w_prior),
    )
    return RayProfile(out, b.noisy.step, b.noisy.entry, b.noisy.direction)


def bundle_for_ray(unc: Volume3D, prior: Volume3D, metal_vol: Volume3D, source, det, step: float,
                   rho: float, metal_cut: float = METAL_CUT) -> ProfileBundle:
    """Profiles of the three volumes (sharing one grid) along ``source -> det``."""
    _check_grids(unc, prior, metal_vol)
    return make_bundle(
        extract_profile(unc, source, det, step),
        extract_profile(prior, source, det, step),
        extract_profile(metal_vol, source, det, step),
        rho, metal_cut,
    )


def _check_grids(unc, prior, metal_vol):
    if not (unc.same_grid(prior) and unc.same_grid(metal_vol)):
        raise ValueError("uncorrected, prior and metal volumes must share one grid")


@numba.njit(cache=True, parallel=True)
def _correct_rays(unc, prior, metal, origin, spacing, dims, step, rho, h, trust, cut,
                  src, det, out):
    for r in numba.prange(src.shape[0]):
        n, x0, y0, z0, ddx, ddy, ddz, ux, uy, uz, t_first = ray_lattice(
            src[r], det[r], origin, spacing, dims, step
        )
        if n == 0:
            out[r] = 0.0
            continue
        noisy = np.empty(n)
        clean = np.empty(n)
        mval = np.empty(n)
        flags = np.empty(n, dtype=np.bool_)
        for k in range(n):
            x = x0 + k * ddx
            y = y0 + k * ddy
            z = z0 + k * ddz
            noisy[k] = trilinear_index(unc, x, y, z)
            clean[k] = trilinear_index(prior, x, y, z)
            m = min(max(trilinear_index(metal, x, y, z), 0.0), rho)
            mval[k] = m
            flags[k] = m > cut * rho
        dt = np.empty(n)
        _dt_1d(flags, step, dt)
        acc = 0.0
        for k in range(n):
            if flags[k]:
                w = mval[k] / rho
                acc += w * rho + (1 - w) * clean[k]
            else:
                w = trust * np.exp(-dt[k] / h)
                acc += w * clean[k] + (1 - w) * noisy[k]
        out[r] = acc * step


def build_corrected_sinogram(orig: Sinogram, unc: Volume3D, prior_aligned: Volume3D, metal_vol: Volume3D,
                             shadow: MetalShadowMask, step: float, p: CorrectionParams) -> Sinogram:
    """Replace every shadow pixel of ``orig`` by the integral of its corrected profile.

    Pixels outside the shadow keep their ``orig`` value.  The three volumes
    must share one grid (resample the prior onto the uncorrected grid first).
    """
    geom = orig.geometry
    if shadow.geometry != geom:
        raise ValueError("shadow mask geometry differs from the sinogram geometry")
    _check_grids(unc, prior_aligned, metal_vol)
    views, iv, iu = np.nonzero(shadow.data)
    out = orig.data.copy()
    if len(views) == 0:
        return Sinogram(geom, out)
    source, det_center, e_u, e_v = geom.frames()
    u = geom.u_coords()[iu][:, None]
    v = geom.v_coords()[iv][:, None]
    src = np.ascontiguousarray(source[views])
    det = np.ascontiguousarray(det_center[views] + u * e_u[views] + v * e_v[views])
    vals = np.empty(len(views))
    _correct_rays(
        unc.data, prior_aligned.data, metal_vol.data,
        np.asarray(unc.origin, dtype=np.float64), np.asarray(unc.spacing, dtype=np.float64),
        np.asarray(unc.dims, dtype=np.int64), float(step),
        float(p.rho), float(p.h), float(p.prior_trust), float(p.metal_cut), src, det, vals,
    )
    out[views, iv, iu] = vals
    return Sinogram(geom, out)
