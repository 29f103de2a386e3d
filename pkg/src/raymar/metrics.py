"""Evaluation against simulation ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask3D, Volume3D


@dataclass(frozen=True)
class ArtifactBandSpec:
    """Non-metal voxels within ``radius`` mm of the metal."""

    radius: float = 20.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("band radius must be positive")


def rmse_masked(a: Volume3D, b: Volume3D, mask: BinaryMask3D) -> float:
    """Root mean squared difference of ``a`` and ``b`` over ``mask``."""
    if a.data.shape != b.data.shape or a.data.shape != mask.data.shape:
        raise ValueError("volumes and mask must share a grid")
    if not mask.data.any():
        raise ValueError("mask is empty")
    d = a.data[mask.data] - b.data[mask.data]
    return float(np.sqrt(np.mean(d * d)))


def euclidean_dt_3d(mask: BinaryMask3D) -> np.ndarray:
    """Exact Euclidean distance (mm) from every voxel center to the nearest mask voxel.

    Mask voxels get 0; an empty mask gives ``inf`` everywhere.
    """
    if not mask.data.any():
        return np.full(mask.data.shape, np.inf)
    # sampling follows the (z, y, x) array axes
    return ndimage.distance_transform_edt(~mask.data, sampling=mask.spacing[::-1])


def artifact_band(metal: BinaryMask3D, spec: ArtifactBandSpec = ArtifactBandSpec()) -> BinaryMask3D:
    dist = euclidean_dt_3d(metal)
    return BinaryMask3D((dist <= spec.radius) & ~metal.data, metal.spacing, metal.origin)


def dice(a: BinaryMask3D, b: BinaryMask3D) -> float:
    sa, sb = a.data.sum(), b.data.sum()
    if sa + sb == 0:
        return 1.0
    return float(2.0 * np.logical_and(a.data, b.data).sum() / (sa + sb))


def band_report(recon: Volume3D, truth: Volume3D, metal: BinaryMask3D,
                spec: ArtifactBandSpec = ArtifactBandSpec()) -> dict:
    """RMSE over the whole grid, the artifact band, and everything outside the band and metal."""
    band = artifact_band(metal, spec)
    outside = BinaryMask3D(~band.data & ~metal.data, metal.spacing, metal.origin)
    full = BinaryMask3D(np.ones(metal.data.shape, dtype=bool), metal.spacing, metal.origin)
    return {
        "rmse_full": rmse_masked(recon, truth, full),
        "rmse_band": rmse_masked(recon, truth, band),
        "rmse_outside": rmse_masked(recon, truth, outside),
        "band_voxels": int(band.data.sum()),
    }


def format_report(values: dict) -> str:
    """Stable ``key = value`` lines, sorted by key."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, float):
            lines.append(f"{key} = {v:.9g}")
        else:
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
