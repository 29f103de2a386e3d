"""Synthetic phantoms and polychromatic cone-beam acquisition.

Phantoms are built from labelled primitives (ellipsoids, elliptic cylinders,
boxes) rasterized at voxel centers; later primitives overwrite earlier ones.
Acquisition computes per-material path lengths along every ray with the
shared projector and combines them through a discrete tube spectrum, so the
only difference from a monochromatic scan is the energy dependence of the
attenuation (beam hardening) plus optional Poisson counting noise.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .projector import default_step, forward_project
from .volume import BinaryMask3D, ConeBeamGeometry, RigidTransform, Sinogram, Volume3D

MATERIALS = ("air", "soft", "bone", "metal")
SHAPES = ("ellipsoid", "cylinder", "box")


@dataclass(frozen=True, eq=False)
class MaterialSpectrumModel:
    """Discrete tube spectrum and per-material attenuation table.

    ``mu[m]`` lists mm^-1 attenuation of material ``m`` at each energy bin.
    """

    energies: tuple
    weights: tuple
    mu: dict
    materials: tuple = MATERIALS

    def __post_init__(self):
        energies = tuple(float(e) for e in self.energies)
        weights = np.asarray(self.weights, dtype=float)
        if len(energies) < 1 or len(weights) != len(energies):
            raise ValueError("need one weight per energy bin")
        if np.any(np.diff(energies) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0, atol=1e-9):
            raise ValueError("spectrum weights must be non-negative and sum to 1")
        mu = {}
        for m in self.materials:
            if m not in self.mu:
                raise ValueError(f"no attenuation values for material {m!r}")
            vals = np.asarray(self.mu[m], dtype=float)
            if vals.shape != (len(energies),):
                raise ValueError(f"material {m!r} needs {len(energies)} attenuation values")
            if np.any(vals < 0) or np.any(np.diff(vals) > 0):
                raise ValueError(f"attenuation of {m!r} must be >= 0 and non-increasing in energy")
            mu[m] = vals
        object.__setattr__(self, "energies", energies)
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "materials", tuple(self.materials))

    def bin_of(self, energy: float) -> int:
        for k, e in enumerate(self.energies):
            if np.isclose(e, energy):
                return k
        raise ValueError(f"reference energy {energy} keV is not one of the bins {self.energies}")

    def mu_at(self, material: str, energy: float) -> float:
        if material not in self.mu:
            raise ValueError(f"unknown material {material!r}")
        return float(self.mu[material][self.bin_of(energy)])

    def monochromatic(self, energy: float) -> "MaterialSpectrumModel":
        k = self.bin_of(energy)
        return MaterialSpectrumModel((energy,), (1.0,), {m: (v[k],) for m, v in self.mu.items()}, self.materials)

    @classmethod
    def default(cls) -> "MaterialSpectrumModel":
        """Three-bin spectrum (50/70/90 keV) with water-, bone- and steel-like materials."""
        return cls(
            energies=(50.0, 70.0, 90.0),
            weights=(0.3, 0.5, 0.2),
            mu={
                "air": (0.0, 0.0, 0.0),
                "soft": (0.0227, 0.0195, 0.0177),
                "bone": (0.065, 0.045, 0.036),
                "metal": (1.54, 0.67, 0.37),
            },
        )


@dataclass(frozen=True)
class Primitive:
    """Labelled solid.

    ``size`` gives semi-axes for an ellipsoid, ``(rx, ry, half_length)`` for a
    cylinder whose axis is the local z axis, and half-extents for a box.
    ``rotation`` holds Euler angles ``(rx, ry, rz)`` in radians, same
    convention as :class:`RigidTransform`, mapping local to world axes.
    """

    shape: str
    material: str
    center: tuple
    size: tuple
    rotation: tuple = (0.0, 0.0, 0.0)

    def matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotation
        return Rotation.from_euler("ZYX", [rz, ry, rx]).as_matrix()

    def contains(self, x, y, z) -> np.ndarray:
        p = np.stack([x - self.center[0], y - self.center[1], z - self.center[2]], axis=-1)
        local = p @ self.matrix()  # world -> local is R^T p
        a, b, c = self.size
        lx, ly, lz = local[..., 0] / a, local[..., 1] / b, local[..., 2] / c
        if self.shape == "ellipsoid":
            return lx**2 + ly**2 + lz**2 <= 1.0
        if self.shape == "cylinder":
            return (lx**2 + ly**2 <= 1.0) & (np.abs(lz) <= 1.0)
        if self.shape == "box":
            return (np.abs(lx) <= 1.0) & (np.abs(ly) <= 1.0) & (np.abs(lz) <= 1.0)
        raise ValueError(f"unknown primitive shape {self.shape!r}")

    def moved(self, T: RigidTransform) -> "Primitive":
        center = T.apply(np.asarray(self.center))
        rot = T.matrix @ self.matrix()
        rz, ry, rx = Rotation.from_matrix(rot).as_euler("ZYX")
        return replace(self, center=tuple(center), rotation=(rx, ry, rz))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple
    spacing: tuple
    primitives: tuple = ()
    origin: tuple | None = None

    def grid(self) -> Volume3D:
        return Volume3D.zeros(self.dims, self.spacing, self.origin)

    def without(self, material: str) -> "PhantomSpec":
        return replace(self, primitives=tuple(p for p in self.primitives if p.material != material))

    def transformed(self, T: RigidTransform) -> "PhantomSpec":
        """Every primitive moved rigidly by ``T`` (grid unchanged)."""
        return replace(self, primitives=tuple(p.moved(T) for p in self.primitives))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Per-voxel material index into ``materials``."""

    data: np.ndarray
    materials: tuple
    spacing: tuple
    origin: tuple

    def mask(self, material: str) -> BinaryMask3D:
        code = self.materials.index(material)
        return BinaryMask3D(self.data == code, self.spacing, self.origin)

    def indicator(self, material: str) -> Volume3D:
        code = self.materials.index(material)
        return Volume3D((self.data == code).astype(np.float64), self.spacing, self.origin)


def build_phantom(spec: PhantomSpec, model: MaterialSpectrumModel, ref_energy: float) -> tuple:
    """Rasterize ``spec`` at voxel centers.

    Returns
    -------
    volume : Volume3D
        Attenuation of each voxel's material at ``ref_energy``.
    labels : LabelVolume
    """
    grid = spec.grid()
    k_ref = model.bin_of(ref_energy)
    x, y, z = grid.voxel_centers()
    codes = np.zeros(grid.data.shape, dtype=np.uint8)
    for prim in spec.primitives:
        if prim.material not in model.materials:
            raise ValueError(f"unknown material label {prim.material!r}")
        inside = prim.contains(x, y, z)
        if not inside.any():
            raise ValueError(f"primitive {prim} does not cover any voxel of the grid")
        codes[inside] = model.materials.index(prim.material)
    table = np.array([model.mu[m][k_ref] for m in model.materials])
    vol = Volume3D(table[codes], grid.spacing, grid.origin)
    return vol, LabelVolume(codes, model.materials, grid.spacing, grid.origin)


def path_lengths(labels: LabelVolume, geom: ConeBeamGeometry, step: float | None = None) -> dict:
    """Per-material path length (mm) of every ray, by projecting material indicators."""
    out = {}
    for m in labels.materials:
        if m == "air":
            continue
        ind = labels.indicator(m)
        out[m] = forward_project(ind, geom, step if step is not None else default_step(ind)).data
    return out


def detected_fraction(lengths: dict, model: MaterialSpectrumModel) -> np.ndarray:
    """Spectrum-weighted transmitted fraction ``sum_k w_k exp(-sum_m mu_m(E_k) l_m)``."""
    shape = next(iter(lengths.values())).shape if lengths else ()
    frac = np.zeros(shape)
    for k, w in enumerate(model.weights):
        expo = np.zeros(shape)
        for m, l in lengths.items():
            expo += model.mu[m][k] * l
        frac += w * np.exp(-expo)
    return frac


def simulate_polychromatic(labels: LabelVolume, model: MaterialSpectrumModel, geom: ConeBeamGeometry,
                           step: float | None = None, photons: float | None = None,
                           seed: int = 0) -> Sinogram:
    """Beam-hardened (and optionally Poisson-noisy) projections of a labelled phantom.

    With ``photons`` set, detected counts are drawn as ``Poisson(photons * F)``
    and floored at one count before taking ``-log``.
    """
    lengths = path_lengths(labels, geom, step)
    if not lengths:
        return Sinogram(geom, np.zeros(geom.shape))
    frac = detected_fraction(lengths, model)
    if photons is not None:
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        counts = rng.poisson(float(photons) * frac)
        frac = np.maximum(counts, 1) / float(photons)
    return Sinogram(geom, -np.log(frac))


# --------------------------------------------------------------------------
# bundled phantom
# --------------------------------------------------------------------------


def _axis_rotation(direction) -> tuple:
    """Euler angles turning the local z axis onto ``direction``."""
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    rot, _ = Rotation.align_vectors([d], [[0.0, 0.0, 1.0]])
    rz, ry, rx = rot.as_euler("ZYX")
    return (rx, ry, rz)


def _vertebra(zc: float) -> list:
    return [
        Primitive("cylinder", "bone", (0.0, 8.0, zc), (16.0, 13.0, 11.0)),
        Primitive("box", "bone", (-10.0, -7.0, zc), (3.5, 7.0, 6.0)),
        Primitive("box", "bone", (10.0, -7.0, zc), (3.5, 7.0, 6.0)),
        Primitive("box", "bone", (0.0, -21.0, zc), (14.0, 3.5, 6.0)),
        Primitive("box", "bone", (0.0, -31.0, zc - 2.0), (3.0, 8.0, 5.0)),
        Primitive("box", "bone", (-20.0, -10.0, zc), (7.0, 3.0, 4.0)),
        Primitive("box", "bone", (20.0, -10.0, zc), (7.0, 3.0, 4.0)),
        Primitive("cylinder", "soft", (0.0, -12.0, zc), (7.0, 6.5, 7.0)),
    ]


def spine_phantom(dims=(128, 128, 128), spacing=(1.0, 1.0, 1.0), screws: int = 2,
                  scale: float | None = None) -> PhantomSpec:
    """Soft-tissue body around two vertebrae, with up to two pedicle screws in the lower one.

    Coordinates are laid out for a 128 mm field of view and scaled to the grid
    extent (``scale``, default: in-plane extent / 128 mm).
    """
    if scale is None:
        scale = min(dims[0] * spacing[0], dims[1] * spacing[1]) / 128.0
    zlo, zhi = -15.0, 17.0
    prims = [Primitive("ellipsoid", "soft", (0.0, 0.0, 0.0), (56.0, 42.0, 90.0))]
    prims += _vertebra(zlo) + _vertebra(zhi)
    screw_axes = [((-12.0, -22.0), (-4.0, 14.0)), ((12.0, -22.0), (4.0, 14.0))]
    for (x0, y0), (x1, y1) in screw_axes[:screws]:
        center = (0.5 * (x0 + x1), 0.5 * (y0 + y1), zlo)
        half = 0.5 * np.hypot(x1 - x0, y1 - y0)
        prims.append(
            Primitive("cylinder", "metal", center, (2.75, 2.75, half), _axis_rotation((x1 - x0, y1 - y0, 0.0)))
        )
    prims = [
        replace(
            p,
            center=tuple(scale * c for c in p.center),
            size=tuple(scale * s for s in p.size),
        )
        for p in prims
    ]
    # body must stay inside the grid along z
    zext = 0.5 * dims[2] * spacing[2]
    body = prims[0]
    prims[0] = replace(body, size=(body.size[0], body.size[1], max(body.size[2], zext + 1.0)))
    return PhantomSpec(tuple(dims), tuple(spacing), tuple(prims))


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def read_spectrum(path) -> MaterialSpectrumModel:
    """Parse a spectrum file: ``[spectrum]`` energies/weights plus ``[attenuation]`` rows."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    mu = {m: _floats(v) for m, v in cp["attenuation"].items()}
    materials = tuple(mu)
    return MaterialSpectrumModel(
        _floats(cp["spectrum"]["energies"]), _floats(cp["spectrum"]["weights"]), mu, materials
    )


def write_spectrum(path, model: MaterialSpectrumModel) -> None:
    cp = configparser.ConfigParser()
    cp["spectrum"] = {
        "energies": " ".join(repr(float(e)) for e in model.energies),
        "weights": " ".join(repr(float(w)) for w in model.weights),
    }
    cp["attenuation"] = {m: " ".join(repr(float(v)) for v in model.mu[m]) for m in model.materials}
    with open(path, "w") as fh:
        cp.write(fh)


def read_phantom(path) -> PhantomSpec:
    """Parse a phantom file: ``[grid]`` then one ``[primitive NAME]`` section per solid, in paint order.

    Primitive keys: ``shape``, ``material``, ``center``, ``size`` and optional
    ``rotation_deg`` (Euler x y z in degrees).
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    g = cp["grid"]
    origin = _floats(g["origin"]) if "origin" in g else None
    prims = []
    for name in cp.sections():
        if not name.startswith("primitive"):
            continue
        s = cp[name]
        shape = s["shape"].strip()
        if shape not in SHAPES:
            raise ValueError(f"[{name}]: unknown shape {shape!r}")
        rot = tuple(np.deg2rad(_floats(s.get("rotation_deg", "0 0 0"))))
        prims.append(Primitive(shape, s["material"].strip(), _floats(s["center"]), _floats(s["size"]), rot))
    dims = tuple(int(v) for v in _floats(g["dims"]))
    return PhantomSpec(dims, _floats(g["spacing"]), tuple(prims), origin)


def write_phantom(path, spec: PhantomSpec) -> None:
    cp = configparser.ConfigParser()
    cp["grid"] = {"dims": " ".join(str(d) for d in spec.dims), "spacing": " ".join(repr(float(s)) for s in spec.spacing)}
    if spec.origin is not None:
        cp["grid"]["origin"] = " ".join(repr(float(o)) for o in spec.origin)
    for i, p in enumerate(spec.primitives):
        cp[f"primitive {i:03d}"] = {
            "shape": p.shape,
            "material": p.material,
            "center": " ".join(repr(float(c)) for c in p.center),
            "size": " ".join(repr(float(c)) for c in p.size),
            "rotation_deg": " ".join(repr(float(np.rad2deg(r))) for r in p.rotation),
        }
    with open(path, "w") as fh:
        cp.write(fh)
