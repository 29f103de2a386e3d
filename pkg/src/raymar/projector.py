"""Ray casting through volumes: ray generation, profile extraction, forward projection.

Line integrals use the rectangle rule over samples spaced ``step`` mm apart,
restricted to the ray's overlap with the voxel-center hull of the volume.
The same sample lattice is used for profile correction and re-projection, so a
profile integrated by :func:`integrate_profile` reproduces the value
:func:`forward_project` stores for that ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .volume import ConeBeamGeometry, Sinogram, Volume3D, trilinear_flat, trilinear_index


@dataclass(frozen=True)
class RayIndex:
    view: int
    u: int
    v: int


@dataclass(frozen=True, eq=False)
class RayProfile:
    """Attenuation samples along one ray.

    ``samples[k]`` lies at ``entry + k * step * direction``.
    """

    samples: np.ndarray
    step: float
    entry: np.ndarray
    direction: np.ndarray

    def __len__(self):
        return len(self.samples)

    def positions(self) -> np.ndarray:
        k = np.arange(len(self.samples))[:, None]
        return self.entry[None, :] + k * self.step * self.direction[None, :]


def default_step(vol: Volume3D) -> float:
    """Half the smallest voxel spacing."""
    return 0.5 * min(vol.spacing)


def ray_for(geom: ConeBeamGeometry, idx: RayIndex) -> tuple:
    """World positions of the source and of the detector bin center for one ray."""
    nu, nv = geom.det_bins
    if not (0 <= idx.view < geom.n_views and 0 <= idx.u < nu and 0 <= idx.v < nv):
        raise IndexError(f"ray index {idx} outside geometry (views={geom.n_views}, nu={nu}, nv={nv})")
    b = geom.angles[idx.view]
    radial = np.array([np.cos(b), np.sin(b), 0.0])
    e_u = np.array([-np.sin(b), np.cos(b), 0.0])
    source = geom.sad * radial
    u = (idx.u - 0.5 * (nu - 1)) * geom.du
    v = (idx.v - 0.5 * (nv - 1)) * geom.dv
    det = -(geom.sdd - geom.sad) * radial + u * e_u + np.array([0.0, 0.0, v])
    return source, det


# --------------------------------------------------------------------------
# lattice construction shared by every ray caster
# --------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _clip_segment(sx, sy, sz, dx, dy, dz, length, lo0, lo1, lo2, hi0, hi1, hi2):
    # parametric overlap [t0, t1] of source + t * d (t in [0, length]) with the box
    t0 = 0.0
    t1 = length
    s = (sx, sy, sz)
    d = (dx, dy, dz)
    lo = (lo0, lo1, lo2)
    hi = (hi0, hi1, hi2)
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if s[a] < lo[a] or s[a] > hi[a]:
                return 0.0, -1.0
        else:
            ta = (lo[a] - s[a]) / d[a]
            tb = (hi[a] - s[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@numba.njit(cache=True, inline="always")
def ray_lattice(src, det, origin, spacing, dims, step):
    """Sample lattice of the segment ``src -> det`` inside the voxel-center hull.

    Returns ``(n, x0, y0, z0, ddx, ddy, ddz, ux, uy, uz, t_first)`` where the
    first six numbers give sample 0 and the per-sample increment in fractional
    voxel index units, ``u`` is the unit direction and ``t_first`` the distance
    of sample 0 from the source.
    """
    dx = det[0] - src[0]
    dy = det[1] - src[1]
    dz = det[2] - src[2]
    length = np.sqrt(dx * dx + dy * dy + dz * dz)
    ux = dx / length
    uy = dy / length
    uz = dz / length
    hi0 = origin[0] + (dims[0] - 1) * spacing[0]
    hi1 = origin[1] + (dims[1] - 1) * spacing[1]
    hi2 = origin[2] + (dims[2] - 1) * spacing[2]
    t0, t1 = _clip_segment(
        src[0], src[1], src[2], ux, uy, uz, length,
        origin[0], origin[1], origin[2], hi0, hi1, hi2,
    )
    chord = t1 - t0
    if chord <= 0.0:
        return 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ux, uy, uz, 0.0
    n = int(np.floor(chord / step + 1e-9))
    # center the n midpoint samples inside the chord
    t_first = t0 + 0.5 * (chord - n * step) + 0.5 * step
    px = src[0] + t_first * ux
    py = src[1] + t_first * uy
    pz = src[2] + t_first * uz
    x0 = (px - origin[0]) / spacing[0]
    y0 = (py - origin[1]) / spacing[1]
    z0 = (pz - origin[2]) / spacing[2]
    ddx = step * ux / spacing[0]
    ddy = step * uy / spacing[1]
    ddz = step * uz / spacing[2]
    return n, x0, y0, z0, ddx, ddy, ddz, ux, uy, uz, t_first


@numba.njit(cache=True, fastmath=True)
def _ray_sum(data, flat, src, det, origin, spacing, dims, step, blo, bhi):
    # rectangle-rule integral; samples outside the [blo, bhi] support box are exactly zero
    n, x0, y0, z0, ddx, ddy, ddz, ux, uy, uz, t_first = ray_lattice(src, det, origin, spacing, dims, step)
    if n == 0:
        return 0.0
    tb0, tb1 = _clip_segment(
        src[0], src[1], src[2], ux, uy, uz, 1e30, blo[0], blo[1], blo[2], bhi[0], bhi[1], bhi[2]
    )
    if tb1 < tb0:
        return 0.0
    k0 = max(0, int(np.ceil((tb0 - t_first) / step)))
    k1 = min(n, int(np.floor((tb1 - t_first) / step)) + 1)
    acc = 0.0
    nx, ny, nz = dims[0], dims[1], dims[2]
    if nx > 1 and ny > 1 and nz > 1:
        for k in range(k0, k1):
            acc += trilinear_flat(flat, x0 + k * ddx, y0 + k * ddy, z0 + k * ddz,
                                  nx - 1, ny - 1, nz - 1, nx, nx * ny)
    else:
        for k in range(k0, k1):
            acc += trilinear_index(data, x0 + k * ddx, y0 + k * ddy, z0 + k * ddz)
    return acc * step


@numba.njit(cache=True, parallel=True)
def _project_rays(data, origin, spacing, dims, step, blo, bhi, src, det, out):
    # src, det: (n_rays, 3)
    flat = data.ravel()
    for r in numba.prange(src.shape[0]):
        out[r] = _ray_sum(data, flat, src[r], det[r], origin, spacing, dims, step, blo, bhi)


@numba.njit(cache=True, parallel=True)
def _project_views(data, origin, spacing, dims, step, blo, bhi,
                   source, det_center, e_u, e_v, u_c, v_c, sub, out):
    n_views = source.shape[0]
    nv = v_c.shape[0]
    nu = u_c.shape[0]
    ns = sub.shape[0]
    flat = data.ravel()
    for q in numba.prange(n_views * nv):
        view = q // nv
        iv = q % nv
        det = np.empty(3)
        src = source[view]
        for iu in range(nu):
            acc = 0.0
            for a in range(ns):
                for b in range(ns):
                    uu = u_c[iu] + sub[a, 0]
                    vv = v_c[iv] + sub[b, 1]
                    for c in range(3):
                        det[c] = det_center[view, c] + uu * e_u[view, c] + vv * e_v[view, c]
                    acc += _ray_sum(data, flat, src, det, origin, spacing, dims, step, blo, bhi)
            out[view, iv, iu] = acc / (ns * ns)


def support_box(vol: Volume3D) -> tuple:
    """World-space box outside of which the trilinear field of ``vol`` is exactly zero.

    Returns ``(lo, hi, empty)``.
    """
    nz_idx = np.nonzero(vol.data)
    if len(nz_idx[0]) == 0:
        return np.zeros(3), np.zeros(3), True
    dims = np.asarray(vol.dims)
    lo = np.array([a.min() for a in nz_idx[::-1]]) - 1
    hi = np.array([a.max() for a in nz_idx[::-1]]) + 1
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, 0, dims - 1)
    o, s = np.asarray(vol.origin), np.asarray(vol.spacing)
    return o + lo * s, o + hi * s, False


def _grid_args(vol: Volume3D):
    return (
        np.asarray(vol.origin, dtype=np.float64),
        np.asarray(vol.spacing, dtype=np.float64),
        np.asarray(vol.dims, dtype=np.int64),
    )


def extract_profile(vol: Volume3D, source, det, step: float) -> RayProfile:
    """Samples of ``vol`` every ``step`` mm along ``source -> det`` inside the volume hull."""
    if step <= 0:
        raise ValueError("step must be positive")
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(det, dtype=np.float64)
    origin, spacing, dims = _grid_args(vol)
    n, x0, y0, z0, ddx, ddy, ddz, ux, uy, uz, t_first = ray_lattice(src, dst, origin, spacing, dims, step)
    direction = np.array([ux, uy, uz])
    k = np.arange(n)
    samples = np.array(
        [trilinear_index(vol.data, x0 + i * ddx, y0 + i * ddy, z0 + i * ddz) for i in k], dtype=np.float64
    )
    return RayProfile(samples, float(step), src + t_first * direction, direction)


def integrate_profile(p: RayProfile) -> float:
    """Rectangle-rule line integral ``sum(samples) * step``."""
    if len(p.samples) == 0:
        return 0.0
    return float(np.sum(p.samples, dtype=np.float64) * p.step)


def project_rays(vol: Volume3D, sources, dets, step: float) -> np.ndarray:
    """Line integrals for an arbitrary batch of rays given as ``(n, 3)`` endpoint arrays."""
    src = np.ascontiguousarray(sources, dtype=np.float64).reshape(-1, 3)
    dst = np.ascontiguousarray(dets, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(src))
    blo, bhi, empty = support_box(vol)
    if not empty:
        _project_rays(vol.data, *_grid_args(vol), float(step), blo, bhi, src, dst, out)
    return out


def forward_project(vol: Volume3D, geom: ConeBeamGeometry, step: float | None = None,
                    supersample: bool = False) -> Sinogram:
    """Cone-beam forward projection of ``vol``.

    Parameters
    ----------
    vol : Volume3D
    geom : ConeBeamGeometry
    step : float, optional
        Sample spacing along each ray in mm; defaults to half the smallest voxel spacing.
    supersample : bool
        Average a 2x2 grid of sub-rays per detector bin instead of the bin center.
    """
    if step is None:
        step = default_step(vol)
    if step <= 0:
        raise ValueError("step must be positive")
    source, det_center, e_u, e_v = geom.frames()
    if supersample:
        q = 0.25
        sub = np.array([[-q * geom.du, -q * geom.dv], [q * geom.du, q * geom.dv]])
    else:
        sub = np.zeros((1, 2))
    out = np.zeros(geom.shape)
    blo, bhi, empty = support_box(vol)
    if empty:
        return Sinogram(geom, out)
    _project_views(
        vol.data, *_grid_args(vol), float(step), blo, bhi,
        source, det_center, e_u, e_v, geom.u_coords(), geom.v_coords(), sub, out,
    )
    return Sinogram(geom, out)
