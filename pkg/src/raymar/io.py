"""Header + raw file format for volumes, masks and sinograms.

A dataset is a plain-text header (``key: value`` lines) next to a raw binary
file holding little-endian samples.  Volumes and sinograms are written as
32-bit IEEE floats, masks as 0/1 bytes::

    magic: RAYMAR-VOL-1
    dims: 128 128 128
    spacing: 1 1 1
    origin: -63.5 -63.5 -63.5
    element_type: float32
    byte_order: little
    data_file: uncorrected.raw

Sinogram headers use ``RAYMAR-SINO-1`` and carry the geometry fields
(``sad``, ``sdd``, ``det_bins``, ``det_size``, ``n_views``, ``angles``) instead
of the grid fields.  Floats are written with ``repr`` so headers round-trip
exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .volume import BinaryMask3D, ConeBeamGeometry, Sinogram, Volume3D

VOL_MAGIC = "RAYMAR-VOL-1"
SINO_MAGIC = "RAYMAR-SINO-1"

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class FormatError(ValueError):
    """Malformed header or data file."""


def _fmt(values) -> str:
    return " ".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in values)


def _paths(path) -> tuple:
    header = Path(path)
    if header.suffix != ".hdr":
        header = header.with_suffix(".hdr")
    return header, header.with_suffix(".raw")


def read_header(path) -> dict:
    header, _ = _paths(path)
    fields = {}
    for lineno, line in enumerate(header.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise FormatError(f"{header}:{lineno}: expected 'key: value'")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    for key in ("magic", "element_type", "byte_order", "data_file"):
        if key not in fields:
            raise FormatError(f"{header}: missing '{key}'")
    if fields["byte_order"] != "little":
        raise FormatError(f"{header}: unsupported byte order {fields['byte_order']!r}")
    if fields["element_type"] not in _DTYPES:
        raise FormatError(f"{header}: unsupported element type {fields['element_type']!r}")
    return fields


def _write(path, lines: dict, array: np.ndarray, element_type: str) -> Path:
    header, raw = _paths(path)
    header.parent.mkdir(parents=True, exist_ok=True)
    lines = dict(lines, element_type=element_type, byte_order="little", data_file=raw.name)
    header.write_text("".join(f"{k}: {v}\n" for k, v in lines.items()))
    np.ascontiguousarray(array, dtype=_DTYPES[element_type]).tofile(raw)
    return header


def _read_raw(path, fields: dict, count: int) -> np.ndarray:
    header, _ = _paths(path)
    raw = header.parent / fields["data_file"]
    data = np.fromfile(raw, dtype=_DTYPES[fields["element_type"]])
    if data.size != count:
        raise FormatError(f"{raw}: expected {count} samples, found {data.size}")
    return data


def write_volume(path, vol) -> Path:
    """Write a :class:`Volume3D` (float32) or :class:`BinaryMask3D` (uint8)."""
    is_mask = isinstance(vol, BinaryMask3D)
    lines = {
        "magic": VOL_MAGIC,
        "dims": _fmt(vol.dims),
        "spacing": _fmt(vol.spacing),
        "origin": _fmt(vol.origin),
    }
    if is_mask:
        lines["kind"] = "mask"
        return _write(path, lines, vol.data.astype(np.uint8), "uint8")
    return _write(path, lines, vol.data, "float32")


def read_volume(path):
    """Read a volume; returns a :class:`BinaryMask3D` for uint8 data."""
    fields = read_header(path)
    if fields["magic"] != VOL_MAGIC:
        raise FormatError(f"{path}: not a volume header (magic {fields['magic']!r})")
    dims = tuple(int(v) for v in fields["dims"].split())
    spacing = tuple(float(v) for v in fields["spacing"].split())
    origin = tuple(float(v) for v in fields["origin"].split())
    nx, ny, nz = dims
    data = _read_raw(path, fields, nx * ny * nz).reshape(nz, ny, nx)
    if fields["element_type"] == "uint8":
        return BinaryMask3D(data != 0, spacing, origin)
    return Volume3D(data.astype(np.float64), spacing, origin)


def _geometry_lines(geom: ConeBeamGeometry) -> dict:
    return {
        "magic": SINO_MAGIC,
        "sad": repr(geom.sad),
        "sdd": repr(geom.sdd),
        "det_bins": _fmt(geom.det_bins),
        "det_size": _fmt(geom.det_size),
        "n_views": str(geom.n_views),
        "angles": " ".join(repr(float(a)) for a in geom.angles),
    }


def _geometry_from(fields: dict) -> ConeBeamGeometry:
    return ConeBeamGeometry(
        float(fields["sad"]),
        float(fields["sdd"]),
        tuple(int(v) for v in fields["det_bins"].split()),
        tuple(float(v) for v in fields["det_size"].split()),
        angles=np.array([float(a) for a in fields["angles"].split()]),
    )


def write_sinogram(path, sino: Sinogram) -> Path:
    return _write(path, _geometry_lines(sino.geometry), sino.data, "float32")


def read_sinogram(path) -> Sinogram:
    fields = read_header(path)
    if fields["magic"] != SINO_MAGIC:
        raise FormatError(f"{path}: not a sinogram header (magic {fields['magic']!r})")
    geom = _geometry_from(fields)
    data = _read_raw(path, fields, int(np.prod(geom.shape))).reshape(geom.shape)
    return Sinogram(geom, data.astype(np.float64))


def write_shadow(path, shadow) -> Path:
    """Write a per-ray boolean mask in sinogram layout (uint8)."""
    lines = dict(_geometry_lines(shadow.geometry), kind="mask")
    return _write(path, lines, shadow.data.astype(np.uint8), "uint8")


def read_shadow(path):
    from .metal import MetalShadowMask

    fields = read_header(path)
    if fields["magic"] != SINO_MAGIC or fields["element_type"] != "uint8":
        raise FormatError(f"{path}: not a sinogram-layout mask")
    geom = _geometry_from(fields)
    data = _read_raw(path, fields, int(np.prod(geom.shape))).reshape(geom.shape)
    return MetalShadowMask(geom, data != 0)
