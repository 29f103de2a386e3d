"""Metal localization: segmentation, metal-only volume and metal shadow."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from .projector import default_step, forward_project
from .registration import intensity_classes
from .volume import BinaryMask3D, ConeBeamGeometry, Volume3D

log = logging.getLogger(__name__)

MIN_CLUSTER_VOXELS = 20


class MetalNotFoundError(ValueError):
    """The volume has no metal candidates."""


@dataclass(frozen=True)
class DbscanParams:
    """``eps`` in mm; ``min_pts`` counts the point itself."""

    eps: float
    min_pts: int = 10

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")

    @classmethod
    def for_spacing(cls, spacing, min_pts: int = 10) -> "DbscanParams":
        return cls(2.0 * max(spacing), min_pts)


@dataclass(frozen=True, eq=False)
class MetalShadowMask:
    """Per-ray flag, ``data[view, v, u]``, for rays that cross metal."""

    geometry: ConeBeamGeometry
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=bool)
        if d.shape != self.geometry.shape:
            raise ValueError(f"shadow shape {d.shape} does not match geometry {self.geometry.shape}")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass
class MetalSegmentation:
    mask: BinaryMask3D
    n_clusters: int
    threshold: float
    bone_level: float
    n_noise: int

    def __iter__(self):
        # unpacks as (mask, cluster count)
        return iter((self.mask, self.n_clusters))


def segment_metal(vol: Volume3D, p: DbscanParams | None = None, min_cluster: int = MIN_CLUSTER_VOXELS,
                  expected_clusters: int | None = None) -> MetalSegmentation:
    """Segment metal implants from ``vol``.

    A two-stage BHT picks metal candidates (soft vs dense, then bone vs metal
    within dense).  DBSCAN on the candidate voxel centers (world mm) drops
    isolated voxels as noise; clusters under ``min_cluster`` voxels are
    dropped too.  ``expected_clusters``, when given, must match the number of
    surviving clusters.
    """
    if p is None:
        p = DbscanParams.for_spacing(vol.spacing)
    try:
        classes = intensity_classes(vol)
    except ValueError as exc:
        raise MetalNotFoundError(f"no metal found: {exc}") from exc
    if classes.metal is None:
        raise MetalNotFoundError("no metal found: no intensity class markedly denser than bone")
    cand = vol.data > classes.metal
    k, j, i = np.nonzero(cand)
    if len(k) == 0:
        raise MetalNotFoundError("no metal found: empty candidate set")
    pts = np.stack([i, j, k], axis=1) * np.asarray(vol.spacing) + np.asarray(vol.origin)
    labels = DBSCAN(eps=p.eps, min_samples=p.min_pts).fit_predict(pts)
    keep = np.zeros(len(labels), dtype=bool)
    n_clusters = 0
    for lab in np.unique(labels[labels >= 0]):
        members = labels == lab
        if members.sum() >= min_cluster:
            keep |= members
            n_clusters += 1
    if n_clusters == 0:
        raise MetalNotFoundError("no metal found: every candidate cluster was noise or too small")
    if expected_clusters is not None and n_clusters != expected_clusters:
        raise ValueError(f"found {n_clusters} metal clusters, expected {expected_clusters}")
    mask = np.zeros(vol.data.shape, dtype=bool)
    mask[k[keep], j[keep], i[keep]] = True
    n_noise = int((labels < 0).sum())
    log.info("metal: threshold %.4g, %d clusters, %d voxels, %d noise", classes.metal, n_clusters,
             int(keep.sum()), n_noise)
    return MetalSegmentation(BinaryMask3D.like(vol, mask), n_clusters, classes.metal, classes.bone_level, n_noise)


def default_rho(vol: Volume3D, mask: BinaryMask3D, bone_level: float) -> float:
    """Mean of ``vol`` over the metal mask, at least 1.5 times the bone level."""
    if not mask.data.any():
        raise ValueError("metal mask is empty")
    return float(max(vol.data[mask.data].mean(), 1.5 * bone_level))


def metal_only_volume(vol: Volume3D, mask: BinaryMask3D, rho: float) -> Volume3D:
    """``rho`` on the mask, 0 elsewhere, on the grid of ``vol``."""
    if not mask.same_grid(vol):
        raise ValueError("mask and volume grids differ")
    return vol.with_data(np.where(mask.data, float(rho), 0.0))


def metal_shadow(metal_vol: Volume3D, geom: ConeBeamGeometry, step: float | None = None,
                 rho: float | None = None) -> MetalShadowMask:
    """Rays whose metal-only projection exceeds half a pure-metal sample, ``0.5 * rho * step``.

    ``rho`` defaults to the largest value of ``metal_vol``.
    """
    if step is None:
        step = default_step(metal_vol)
    if rho is None:
        rho = float(metal_vol.data.max())
    if rho <= 0:
        return MetalShadowMask(geom, np.zeros(geom.shape, dtype=bool))
    proj = forward_project(metal_vol, geom, step)
    return MetalShadowMask(geom, proj.data > 0.5 * rho * step)
