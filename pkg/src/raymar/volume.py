"""Core data types: volumes, masks, cone-beam geometry, sinograms, rigid motion.

World coordinates are millimetres with the rotation axis along z and the
isocenter at the origin.  Volume arrays are stored as ``(nz, ny, nx)`` so that
x is the fastest-varying index, matching the on-disk layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.spatial.transform import Rotation

# Tolerance (in voxel index units) for points that land on the voxel-center hull.
_HULL_TOL = 1e-6


def _triple(values, name, kind=float) -> tuple:
    out = tuple(kind(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have three components, got {values!r}")
    return out


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Regular 3D grid of linear attenuation values (mm^-1).

    Parameters
    ----------
    data : ndarray, shape (nz, ny, nx)
        Voxel values.  Stored as float64.
    spacing : (sx, sy, sz)
        Voxel size in mm.
    origin : (ox, oy, oz), optional
        World position of the center of voxel (0, 0, 0).  Defaults to the
        origin that centers the grid on the isocenter.
    """

    data: np.ndarray
    spacing: tuple
    origin: tuple | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        dims = data.shape[::-1]
        origin = self.origin
        if origin is None:
            origin = tuple(-0.5 * (n - 1) * s for n, s in zip(dims, spacing))
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(origin, "origin"))

    @property
    def dims(self) -> tuple:
        """Voxel counts ``(nx, ny, nz)``."""
        return self.data.shape[::-1]

    @property
    def center(self) -> np.ndarray:
        """World position of the grid center."""
        return np.asarray(self.origin) + 0.5 * (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def same_grid(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def with_data(self, data) -> "Volume3D":
        """Same grid, new values."""
        return Volume3D(np.asarray(data).reshape(self.data.shape), self.spacing, self.origin)

    def voxel_centers(self) -> tuple:
        """World coordinate arrays ``(x, y, z)`` of every voxel center, each shaped like ``data``."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return x, y, z

    @classmethod
    def zeros(cls, dims, spacing, origin=None) -> "Volume3D":
        nx, ny, nz = _triple(dims, "dims", int)
        return cls(np.zeros((nz, ny, nx)), spacing, origin)


@dataclass(frozen=True, eq=False)
class BinaryMask3D:
    """Boolean voxel mask sharing the grid of a companion volume."""

    data: np.ndarray
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=bool)
        if data.ndim != 3:
            raise ValueError("mask data must be 3D")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple:
        return self.data.shape[::-1]

    @classmethod
    def like(cls, vol: Volume3D, data) -> "BinaryMask3D":
        return cls(np.asarray(data, dtype=bool).reshape(vol.data.shape), vol.spacing, vol.origin)

    def count(self) -> int:
        return int(self.data.sum())

    def same_grid(self, other) -> bool:
        return Volume3D.same_grid(self, other)  # type: ignore[arg-type]


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular-orbit cone-beam scanner with a flat detector.

    The source sits at ``sad * (cos b, sin b, 0)`` for view angle ``b``; the
    detector is centered on the source-isocenter line at distance ``sdd`` from
    the source, with u tangential and v along z.
    """

    sad: float
    sdd: float
    det_bins: tuple  # (nu, nv)
    det_size: tuple  # (wu, wv) mm
    angles: np.ndarray = field(default=None)  # type: ignore[assignment]
    n_views: int | None = None

    def __post_init__(self):
        if not 0 < self.sad < self.sdd:
            raise ValueError(f"need 0 < sad < sdd, got sad={self.sad}, sdd={self.sdd}")
        nu, nv = (int(b) for b in self.det_bins)
        wu, wv = (float(w) for w in self.det_size)
        if nu < 1 or nv < 1 or wu <= 0 or wv <= 0:
            raise ValueError("detector bins must be >= 1 and sizes > 0")
        angles = self.angles
        if angles is None:
            if self.n_views is None:
                raise ValueError("give either angles or n_views")
            angles = 2 * np.pi * np.arange(int(self.n_views)) / int(self.n_views)
        angles = np.array(angles, dtype=np.float64).ravel()
        if angles.size < 1 or np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be non-empty and strictly increasing")
        if self.n_views is not None and int(self.n_views) != angles.size:
            raise ValueError("n_views does not match the number of angles")
        angles.setflags(write=False)
        object.__setattr__(self, "sad", float(self.sad))
        object.__setattr__(self, "sdd", float(self.sdd))
        object.__setattr__(self, "det_bins", (nu, nv))
        object.__setattr__(self, "det_size", (wu, wv))
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "n_views", angles.size)

    def __eq__(self, other):
        if not isinstance(other, ConeBeamGeometry):
            return NotImplemented
        return (
            self.sad == other.sad
            and self.sdd == other.sdd
            and self.det_bins == other.det_bins
            and self.det_size == other.det_size
            and np.array_equal(self.angles, other.angles)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def shape(self) -> tuple:
        """Sinogram array shape ``(n_views, nv, nu)``."""
        return (self.n_views, self.det_bins[1], self.det_bins[0])

    @property
    def du(self) -> float:
        return self.det_size[0] / self.det_bins[0]

    @property
    def dv(self) -> float:
        return self.det_size[1] / self.det_bins[1]

    def u_coords(self) -> np.ndarray:
        """Detector bin-center offsets along u (mm)."""
        nu = self.det_bins[0]
        return (np.arange(nu) - 0.5 * (nu - 1)) * self.du

    def v_coords(self) -> np.ndarray:
        nv = self.det_bins[1]
        return (np.arange(nv) - 0.5 * (nv - 1)) * self.dv

    def frames(self) -> tuple:
        """Per-view source position, detector center and detector u/v unit vectors.

        Returns four ``(n_views, 3)`` arrays.
        """
        c, s = np.cos(self.angles), np.sin(self.angles)
        zero, one = np.zeros_like(c), np.ones_like(c)
        radial = np.stack([c, s, zero], axis=1)
        source = self.sad * radial
        det_center = -(self.sdd - self.sad) * radial
        e_u = np.stack([-s, c, zero], axis=1)
        e_v = np.stack([zero, zero, one], axis=1)
        return source, det_center, e_u, e_v

    @classmethod
    def oarm(cls, n_views: int = 360) -> "ConeBeamGeometry":
        """Medtronic O-arm geometry (647.7/1147.7 mm, 1024x384 bins)."""
        return cls(647.7, 1147.7, (1024, 384), (393.432, 290.224), n_views=n_views)


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Stack of projection images, ``data`` shaped ``(n_views, nv, nu)``."""

    geometry: ConeBeamGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.shape != self.geometry.shape:
            raise ValueError(f"sinogram shape {data.shape} does not match geometry {self.geometry.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("sinogram data must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def with_data(self, data) -> "Sinogram":
        return Sinogram(self.geometry, data)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion: rotation about ``center`` followed by translation.

    ``T(p) = R (p - center) + center + t`` with ``R = Rz(rz) Ry(ry) Rx(rx)``
    (intrinsic z, then y, then x).
    """

    t: tuple = (0.0, 0.0, 0.0)
    r: tuple = (0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "t", _triple(self.t, "t"))
        object.__setattr__(self, "r", _triple(self.r, "r"))
        object.__setattr__(self, "center", _triple(self.center, "center"))

    @classmethod
    def from_params(cls, params: Sequence[float], center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from the 6-vector ``(tx, ty, tz, rx, ry, rz)``."""
        p = np.asarray(params, dtype=float)
        return cls(tuple(p[:3]), tuple(p[3:6]), center)

    @property
    def params(self) -> np.ndarray:
        return np.array(self.t + self.r)

    @property
    def matrix(self) -> np.ndarray:
        rx, ry, rz = self.r
        return Rotation.from_euler("ZYX", [rz, ry, rx]).as_matrix()

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        c = np.asarray(self.center)
        return (p - c) @ self.matrix.T + c + np.asarray(self.t)

    def apply_inverse(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        c = np.asarray(self.center)
        return (p - c - np.asarray(self.t)) @ self.matrix + c

    def inverse(self) -> "RigidTransform":
        rot = self.matrix.T
        rz, ry, rx = Rotation.from_matrix(rot).as_euler("ZYX")
        t = -rot @ np.asarray(self.t)
        return RigidTransform(tuple(t), (rx, ry, rz), self.center)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``, expressed about ``self.center``."""
        c = np.asarray(self.center)
        rot = self.matrix @ other.matrix
        # constant term of self(other(p)) rewritten as rot (p - c) + c + t
        offset = self.apply(other.apply(c)) - c
        rz, ry, rx = Rotation.from_matrix(rot).as_euler("ZYX")
        return RigidTransform(tuple(offset), (rx, ry, rz), self.center)


IDENTITY = RigidTransform()


# --------------------------------------------------------------------------
# interpolation kernels
# --------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _axis_cell(x, n):
    # returns (i0, frac, ok) for index coordinate x on an axis with n nodes
    if x < -_HULL_TOL or x > n - 1 + _HULL_TOL:
        return 0, 0.0, False
    if n == 1:
        return 0, 0.0, True
    if x < 0.0:
        x = 0.0
    i0 = int(x)
    if i0 >= n - 1:
        i0 = n - 2
    f = x - i0
    if f > 1.0:
        f = 1.0
    return i0, f, True


@numba.njit(cache=True)
def trilinear_index(data, x, y, z):
    """Trilinear sample of ``data[z, y, x]`` at fractional index coordinates; 0 outside the hull."""
    nz, ny, nx = data.shape
    i, fx, okx = _axis_cell(x, nx)
    j, fy, oky = _axis_cell(y, ny)
    k, fz, okz = _axis_cell(z, nz)
    if not (okx and oky and okz):
        return 0.0
    i1 = i + 1 if nx > 1 else i
    j1 = j + 1 if ny > 1 else j
    k1 = k + 1 if nz > 1 else k
    c00 = data[k, j, i] * (1 - fx) + data[k, j, i1] * fx
    c10 = data[k, j1, i] * (1 - fx) + data[k, j1, i1] * fx
    c01 = data[k1, j, i] * (1 - fx) + data[k1, j, i1] * fx
    c11 = data[k1, j1, i] * (1 - fx) + data[k1, j1, i1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@numba.njit(cache=True, fastmath=True, inline="always")
def trilinear_flat(d, x, y, z, nx1, ny1, nz1, sy, sz):
    """Trilinear sample of the flattened array ``d`` for points already inside the hull.

    Coordinates are clamped onto the hull; every axis must have at least two
    nodes (``nx1 = nx - 1 >= 1`` etc.).  ``sy``/``sz`` are the row and slice strides.
    """
    x = min(max(x, 0.0), nx1 * 1.0)
    y = min(max(y, 0.0), ny1 * 1.0)
    z = min(max(z, 0.0), nz1 * 1.0)
    i = min(int(x), nx1 - 1)
    j = min(int(y), ny1 - 1)
    k = min(int(z), nz1 - 1)
    fx = x - i
    fy = y - j
    fz = z - k
    b = k * sz + j * sy + i
    c0 = d[b] + fx * (d[b + 1] - d[b])
    c1 = d[b + sy] + fx * (d[b + sy + 1] - d[b + sy])
    b += sz
    c2 = d[b] + fx * (d[b + 1] - d[b])
    c3 = d[b + sy] + fx * (d[b + sy + 1] - d[b + sy])
    c0 = c0 + fy * (c1 - c0)
    c2 = c2 + fy * (c3 - c2)
    return c0 + fz * (c2 - c0)


@numba.njit(cache=True)
def nearest_index(data, x, y, z):
    """Nearest-neighbour sample at fractional index coordinates; 0 outside the hull."""
    nz, ny, nx = data.shape
    if (
        x < -_HULL_TOL or x > nx - 1 + _HULL_TOL
        or y < -_HULL_TOL or y > ny - 1 + _HULL_TOL
        or z < -_HULL_TOL or z > nz - 1 + _HULL_TOL
    ):
        return 0
    i = min(max(int(np.floor(x + 0.5)), 0), nx - 1)
    j = min(max(int(np.floor(y + 0.5)), 0), ny - 1)
    k = min(max(int(np.floor(z + 0.5)), 0), nz - 1)
    return data[k, j, i]


@numba.njit(cache=True, parallel=True)
def _resample_affine(data, out_shape, mat, off, nearest):
    nz, ny, nx = out_shape
    out = np.zeros(out_shape, dtype=data.dtype)
    for k in numba.prange(nz):
        for j in range(ny):
            for i in range(nx):
                x = mat[0, 0] * i + mat[0, 1] * j + mat[0, 2] * k + off[0]
                y = mat[1, 0] * i + mat[1, 1] * j + mat[1, 2] * k + off[1]
                z = mat[2, 0] * i + mat[2, 1] * j + mat[2, 2] * k + off[2]
                if nearest:
                    out[k, j, i] = nearest_index(data, x, y, z)
                else:
                    out[k, j, i] = trilinear_index(data, x, y, z)
    return out


def index_affine(T: RigidTransform, src, ref) -> tuple:
    """Affine map from ``ref`` voxel indices to ``src`` fractional indices under ``T^-1``.

    Returns ``(mat, off)`` such that ``src_index = mat @ ref_index + off``.
    """
    rot = T.matrix
    c = np.asarray(T.center)
    t = np.asarray(T.t)
    s_ref, o_ref = np.asarray(ref.spacing), np.asarray(ref.origin)
    s_src, o_src = np.asarray(src.spacing), np.asarray(src.origin)
    # world = o_ref + s_ref * i ; p = R^T (world - c - t) + c ; idx = (p - o_src) / s_src
    mat = (rot.T * s_ref[None, :]) / s_src[:, None]
    off = (rot.T @ (o_ref - c - t) + c - o_src) / s_src
    return np.ascontiguousarray(mat), np.ascontiguousarray(off)


def sample_trilinear(vol: Volume3D, p) -> float:
    """Trilinear interpolation of ``vol`` at world point ``p`` (0.0 outside the voxel-center hull)."""
    idx = (np.asarray(p, dtype=float) - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    return float(trilinear_index(vol.data, idx[0], idx[1], idx[2]))


def resample_rigid(vol: Volume3D, T: RigidTransform, ref: Volume3D) -> Volume3D:
    """Resample ``vol`` moved by ``T`` onto the grid of ``ref``.

    Each output voxel center ``c`` receives ``vol`` sampled at ``T^-1(c)``.
    """
    mat, off = index_affine(T, vol, ref)
    out = _resample_affine(vol.data, ref.data.shape, mat, off, False)
    return Volume3D(out, ref.spacing, ref.origin)


def resample_mask_rigid(mask: BinaryMask3D, T: RigidTransform, ref) -> BinaryMask3D:
    """Nearest-neighbour transport of a mask, same convention as :func:`resample_rigid`."""
    mat, off = index_affine(T, mask, ref)
    src = mask.data.view(np.uint8)
    out = _resample_affine(src, ref.data.shape, mat, off, True)
    return BinaryMask3D(out.astype(bool), ref.spacing, ref.origin)
