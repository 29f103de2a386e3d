"""Seamless gradient-domain in-painting of the metal shadow, one view at a time.

Inside the shadow ``R`` the new data follow the pairwise differences of the
corrected data over 8-connected neighbours, while every neighbour outside
``R`` pulls the value towards the original data::

    E(x) = sum_{i in R} [ sum_{j in N_i & R} ((x_i - x_j) - (c_i - c_j))^2
                          + sum_{j in N_i - R} (x_i - o_j)^2 ]

Each unordered pair inside ``R`` appears twice in the sum.  Setting the
gradient to zero gives the sparse SPD system solved here by conjugate
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg

from .metal import MetalShadowMask
from .volume import Sinogram

OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


class InpaintError(RuntimeError):
    """Solver failure; ``residual`` is the final relative residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class InpaintProblem:
    """One view: original and corrected data, shadow mask and solver settings."""

    orig: np.ndarray
    corr: np.ndarray
    region: np.ndarray
    tol: float = 1e-6
    max_iter: int = 10000

    def __post_init__(self):
        o = np.asarray(self.orig, dtype=np.float64)
        c = np.asarray(self.corr, dtype=np.float64)
        r = np.asarray(self.region, dtype=bool)
        if o.ndim != 2 or o.shape != c.shape or o.shape != r.shape:
            raise ValueError("orig, corr and region must be 2-D arrays of one shape")
        if not r.any():
            raise ValueError("in-paint region is empty")
        if not self.tol > 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")
        object.__setattr__(self, "orig", o)
        object.__setattr__(self, "corr", c)
        object.__setattr__(self, "region", r)


def _neighbour_pairs(region: np.ndarray):
    # yields (i_flat_in_R, j_row, j_col, j_in_R) per offset, for in-image neighbours
    h, w = region.shape
    ri, rj = np.nonzero(region)
    for dy, dx in OFFSETS:
        ni, nj = ri + dy, rj + dx
        ok = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
        yield np.flatnonzero(ok), ri[ok], rj[ok], ni[ok], nj[ok], region[ni[ok], nj[ok]]


def normal_equations(p: InpaintProblem):
    """Sparse system ``A x = b`` over the shadow pixels (row-major order of ``np.nonzero``).

    Returns ``(A, b, n_outside)`` where ``n_outside[k]`` counts the non-shadow
    neighbours of unknown ``k``.
    """
    region, o, c = p.region, p.orig, p.corr
    index = np.full(region.shape, -1, dtype=np.int64)
    n = int(region.sum())
    index[region] = np.arange(n)
    diag = np.zeros(n)
    rhs = np.zeros(n)
    n_out = np.zeros(n, dtype=np.int64)
    rows, cols = [], []
    for k, ri, rj, ni, nj, inside in _neighbour_pairs(region):
        # each offset hits every unknown at most once, so fancy-index updates are safe
        a = k[inside]
        diag[a] += 2.0
        rhs[a] += 2.0 * (c[ri[inside], rj[inside]] - c[ni[inside], nj[inside]])
        rows.append(a)
        cols.append(index[ni[inside], nj[inside]])
        b = k[~inside]
        diag[b] += 1.0
        rhs[b] += o[ni[~inside], nj[~inside]]
        n_out[b] += 1
    rows = np.concatenate(rows + [np.arange(n)])
    cols = np.concatenate(cols + [np.arange(n)])
    vals = np.concatenate([np.full(len(rows) - n, -2.0), diag])
    a_mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return a_mat, rhs, n_out


def _check_anchored(region: np.ndarray, n_out: np.ndarray):
    labels, n_comp = ndimage.label(region, structure=np.ones((3, 3), dtype=bool))
    touching = np.bincount(labels[region], weights=n_out, minlength=n_comp + 1)[1:]
    if np.any(touching == 0):
        raise InpaintError("an in-paint region component has no neighbour outside the region; the system is singular")


def objective(new: np.ndarray, p: InpaintProblem) -> float:
    """Value of the in-painting energy for a full view ``new`` (only its shadow values matter)."""
    x = np.where(p.region, new, p.orig)
    total = 0.0
    for _, ri, rj, ni, nj, inside in _neighbour_pairs(p.region):
        d = (x[ri, rj] - x[ni, nj]) - (p.corr[ri, rj] - p.corr[ni, nj])
        total += float(np.sum(d[inside] ** 2))
        total += float(np.sum((x[ri, rj] - p.orig[ni, nj])[~inside] ** 2))
    return total


def inpaint_view(p: InpaintProblem) -> np.ndarray:
    """Minimize the in-painting energy over the shadow pixels of one view.

    Pixels outside the region are returned unchanged.  The starting guess is
    the corrected data shifted by the mean seam offset.

    Raises
    ------
    InpaintError
        If a region component is not anchored to any outside pixel, or if
        conjugate gradients do not reach ``tol`` within ``max_iter`` iterations.
    """
    a_mat, rhs, n_out = normal_equations(p)
    _check_anchored(p.region, n_out)
    c_r = p.corr[p.region]
    seam = []
    for k, ri, rj, ni, nj, inside in _neighbour_pairs(p.region):
        seam.append(p.orig[ni[~inside], nj[~inside]] - p.corr[ri[~inside], rj[~inside]])
    x0 = c_r + np.mean(np.concatenate(seam))
    x, info = cg(a_mat, rhs, x0=x0, rtol=p.tol, atol=0.0, maxiter=p.max_iter)
    norm_b = np.linalg.norm(rhs)
    residual = float(np.linalg.norm(rhs - a_mat @ x) / (norm_b if norm_b > 0 else 1.0))
    if info != 0:
        raise InpaintError(f"conjugate gradients stopped after {p.max_iter} iterations, "
                           f"relative residual {residual:.3g}", residual)
    out = p.orig.copy()
    out[p.region] = x
    return out


def inpaint_sinogram(orig: Sinogram, corr: Sinogram, shadow: MetalShadowMask,
                     tol: float = 1e-6, max_iter: int = 10000) -> Sinogram:
    """Apply :func:`inpaint_view` to every view with a non-empty shadow."""
    if orig.geometry != corr.geometry or orig.geometry != shadow.geometry:
        raise ValueError("sinogram and shadow geometries differ")
    out = orig.data.copy()
    for view in range(orig.geometry.n_views):
        region = shadow.data[view]
        if region.any():
            out[view] = inpaint_view(InpaintProblem(orig.data[view], corr.data[view], region, tol, max_iter))
    return Sinogram(orig.geometry, out)


def seam_discontinuity(new: Sinogram, orig: Sinogram, shadow: MetalShadowMask) -> float:
    """Largest jump across the shadow boundary relative to the view's dynamic range.

    For every 8-connected pair of a shadow pixel ``i`` and a non-shadow pixel
    ``j`` the jump is ``|new_i - orig_j|``; each view's maximum is divided by
    the range of ``orig`` in that view, and the maximum over views returned.
    """
    worst = 0.0
    for view in range(orig.geometry.n_views):
        region = shadow.data[view]
        if not region.any():
            continue
        o = orig.data[view]
        span = float(o.max() - o.min())
        if span <= 0:
            continue
        jump = 0.0
        for _, ri, rj, ni, nj, inside in _neighbour_pairs(region):
            if (~inside).any():
                jump = max(jump, float(np.max(np.abs(new.data[view][ri[~inside], rj[~inside]]
                                                     - o[ni[~inside], nj[~inside]]))))
        worst = max(worst, jump / span)
    return worst
