"""Bone masks and rigid alignment of the prior volume to the uncorrected one.

Alignment minimizes a penalized L1 distance between the bone-only volumes,
with a hybrid particle swarm (standard velocity update plus a randomization
and crossover schedule for poor particles).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage, optimize

from .volume import (
    _HULL_TOL, BinaryMask3D, RigidTransform, Volume3D, index_affine, trilinear_flat, trilinear_index,
)

log = logging.getLogger(__name__)

N_HIST_BINS = 256
CLIP_PERCENT = 0.5


# --------------------------------------------------------------------------
# balanced histogram thresholding
# --------------------------------------------------------------------------


def bht_threshold(counts) -> int:
    """Balanced histogram threshold: index of the final balance bin.

    The scale spans the non-empty part of the histogram with its fulcrum at
    the midpoint.  The heavier side loses its outermost bin until the range
    collapses; the fulcrum follows the midpoint of what remains.  Equal
    weights trim the right side, and trimming stops early once all weight has
    been removed.
    """
    h = np.asarray(counts, dtype=np.float64).ravel()
    if h.size < 2:
        raise ValueError("histogram needs at least two bins")
    if np.any(h < 0) or h.sum() <= 0:
        raise ValueError("histogram is empty")
    nz = np.flatnonzero(h)
    lo, hi = int(nz[0]), int(nz[-1])
    c = (lo + hi) // 2
    left = h[lo:c + 1].sum()
    right = h[c + 1:hi + 1].sum()
    while lo < hi:
        if left > right:
            left -= h[lo]
            lo += 1
        else:
            right -= h[hi]
            hi -= 1
        if left + right <= 0:
            break
        new_c = (lo + hi) // 2
        while c < new_c:
            c += 1
            left += h[c]
            right -= h[c]
        while c > new_c:
            left -= h[c]
            right += h[c]
            c -= 1
    return (lo + hi) // 2


def bht_value(values: np.ndarray, n_bins: int = N_HIST_BINS, clip_percent: float = CLIP_PERCENT) -> float:
    """Intensity threshold from an ``n_bins`` histogram: upper edge of the BHT bin.

    The histogram spans the ``[clip_percent, 100 - clip_percent]`` percentile
    range, with values outside it clamped into the end bins, so a few extreme
    voxels (streaks, hot spots) cannot stretch the scale.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values to threshold")
    lo, hi = np.percentile(v, [clip_percent, 100.0 - clip_percent])
    if not hi > lo:
        lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise ValueError("constant intensities: no two materials to separate")
    counts, edges = np.histogram(np.clip(v, lo, hi), bins=n_bins, range=(lo, hi))
    return float(edges[bht_threshold(counts) + 1])


@dataclass(frozen=True)
class IntensityClasses:
    """Soft/dense threshold, and the metal/bone threshold when metal is present."""

    dense: float
    metal: float | None
    bone_level: float


def intensity_classes(vol: Volume3D, metal_contrast: float = 3.0) -> IntensityClasses:
    """Two-stage BHT: soft vs dense over all voxels, then bone vs metal within dense.

    The dense class is considered to contain metal when the mean above the
    second threshold is at least ``metal_contrast`` times the mean of the
    voxels between the two thresholds.
    """
    v = vol.data.ravel()
    dense_t = bht_value(v)
    dense = v[v > dense_t]
    if dense.size < 2 or dense.max() <= dense.min():
        level = float(dense.mean()) if dense.size else dense_t
        return IntensityClasses(dense_t, None, level)
    metal_t = bht_value(dense)
    upper = dense[dense > metal_t]
    middle = dense[dense <= metal_t]
    if upper.size and middle.size and upper.mean() >= metal_contrast * abs(middle.mean()):
        return IntensityClasses(dense_t, metal_t, float(middle.mean()))
    return IntensityClasses(dense_t, None, float(dense.mean()))


def extract_bone_mask(vol: Volume3D, metal_contrast: float = 3.0) -> BinaryMask3D:
    """Voxels above the soft/dense threshold (bone, and metal if present)."""
    classes = intensity_classes(vol, metal_contrast)
    return BinaryMask3D.like(vol, vol.data > classes.dense)


def bone_only(vol: Volume3D, mask: BinaryMask3D) -> Volume3D:
    return vol.with_data(np.where(mask.data, vol.data, 0.0))


# --------------------------------------------------------------------------
# penalized L1 objective
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegistrationObjectiveParams:
    """Weights and sampling for the penalized L1 objective.

    ``mask_unc`` / ``mask_pri`` are the bone masks of the two volumes; a voxel
    pair whose mask memberships disagree is weighted by ``penalty_factor``.
    The sum runs over every ``stride``-th voxel of the uncorrected grid.
    """

    mask_unc: BinaryMask3D
    mask_pri: BinaryMask3D
    penalty_factor: float = 2.0
    stride: int = 2

    def __post_init__(self):
        if not self.penalty_factor >= 1.0:
            raise ValueError("penalty_factor must be >= 1")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be a positive integer")

    def with_stride(self, stride: int) -> "RegistrationObjectiveParams":
        return RegistrationObjectiveParams(self.mask_unc, self.mask_pri, self.penalty_factor, stride)


@numba.njit(cache=True, fastmath=True, inline="always")
def _pair_term(pri, pflat, mpri, live, flat, x, y, z, u, u_in_mask, penalty):
    # |u - prior(x, y, z)| weighted by mask agreement; prior is 0 / non-bone outside its hull.
    # ``live`` flags cells within one voxel of the prior support: elsewhere every
    # interpolation corner is zero and non-bone.
    nz, ny, nx = pri.shape
    v = 0.0
    m = False
    if not (x < -_HULL_TOL or x > nx - 1 + _HULL_TOL or y < -_HULL_TOL or y > ny - 1 + _HULL_TOL
            or z < -_HULL_TOL or z > nz - 1 + _HULL_TOL):
        i0 = min(max(int(x), 0), nx - 1)
        j0 = min(max(int(y), 0), ny - 1)
        k0 = min(max(int(z), 0), nz - 1)
        if not live[k0, j0, i0]:
            return abs(u) if not u_in_mask else penalty * abs(u)
        i = min(max(int(x + 0.5), 0), nx - 1)
        j = min(max(int(y + 0.5), 0), ny - 1)
        k = min(max(int(z + 0.5), 0), nz - 1)
        m = mpri[k, j, i] != 0
        if flat:
            v = trilinear_flat(pflat, x, y, z, nx - 1, ny - 1, nz - 1, nx, nx * ny)
        else:
            v = trilinear_index(pri, x, y, z)
    w = 1.0 if m == u_in_mask else penalty
    return w * abs(u - v)


@numba.njit(cache=True, parallel=True, fastmath=True)
def _objective_batch(pri, mpri, live, a_idx, a_val, a_mask, in_a, mats, offs, boxes, stride, penalty, out):
    # Voxels outside ``a_idx`` have a zero, non-bone uncorrected value, so they
    # only contribute where the moved prior is non-zero: inside ``boxes``.
    flat = pri.shape[0] > 1 and pri.shape[1] > 1 and pri.shape[2] > 1
    pflat = pri.ravel()
    for p in numba.prange(mats.shape[0]):
        m = mats[p]
        o = offs[p]
        s = 0.0
        for n in range(a_idx.shape[0]):
            i, j, k = a_idx[n, 0], a_idx[n, 1], a_idx[n, 2]
            x = m[0, 0] * i + m[0, 1] * j + m[0, 2] * k + o[0]
            y = m[1, 0] * i + m[1, 1] * j + m[1, 2] * k + o[1]
            z = m[2, 0] * i + m[2, 1] * j + m[2, 2] * k + o[2]
            s += _pair_term(pri, pflat, mpri, live, flat, x, y, z, a_val[n], a_mask[n], penalty)
        b = boxes[p]
        for k in range(b[4], b[5] + 1, stride):
            for j in range(b[2], b[3] + 1, stride):
                x = m[0, 0] * b[0] + m[0, 1] * j + m[0, 2] * k + o[0]
                y = m[1, 0] * b[0] + m[1, 1] * j + m[1, 2] * k + o[1]
                z = m[2, 0] * b[0] + m[2, 1] * j + m[2, 2] * k + o[2]
                dx = m[0, 0] * stride
                dy = m[1, 0] * stride
                dz = m[2, 0] * stride
                for i in range(b[0], b[1] + 1, stride):
                    if not in_a[k, j, i]:
                        s += _pair_term(pri, pflat, mpri, live, flat, x, y, z, 0.0, False, penalty)
                    x += dx
                    y += dy
                    z += dz
        out[p] = s


class _ObjectiveData:
    """Pre-sampled data shared by all evaluations of one objective."""

    def __init__(self, f_unc: Volume3D, f_pri: Volume3D, params: RegistrationObjectiveParams):
        if not (params.mask_unc.same_grid(f_unc) and params.mask_pri.same_grid(f_pri)):
            raise ValueError("bone masks must share the grids of their volumes")
        self.f_unc, self.f_pri, self.params = f_unc, f_pri, params
        st = params.stride
        active = (f_unc.data != 0) | params.mask_unc.data
        sub = np.zeros_like(active)
        sub[::st, ::st, ::st] = True
        k, j, i = np.nonzero(active & sub)
        self.a_idx = np.ascontiguousarray(np.stack([i, j, k], axis=1).astype(np.int64))
        self.a_val = f_unc.data[k, j, i].copy()
        self.a_mask = params.mask_unc.data[k, j, i].copy()
        self.in_a = active
        self.mpri = params.mask_pri.data.view(np.uint8)
        support = (f_pri.data != 0) | params.mask_pri.data
        self.live = ndimage.maximum_filter(support.view(np.uint8), size=3, mode="constant")
        if support.any():
            idx = np.nonzero(support)
            lo = np.array([a.min() for a in idx[::-1]]) - 1.0
            hi = np.array([a.max() for a in idx[::-1]]) + 1.0
            corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
            self.corners = np.asarray(f_pri.origin) + corners * np.asarray(f_pri.spacing)
        else:
            self.corners = None

    def _box(self, T: RigidTransform) -> np.ndarray:
        # stride-aligned index box on the uncorrected grid covering T(prior support)
        if self.corners is None:
            return np.array([0, -1, 0, -1, 0, -1], dtype=np.int64)
        st = self.params.stride
        world = T.apply(self.corners)
        idx = (world - np.asarray(self.f_unc.origin)) / np.asarray(self.f_unc.spacing)
        dims = np.asarray(self.f_unc.dims)
        lo = np.clip(np.floor(idx.min(axis=0)) - 1, 0, dims - 1)
        hi = np.clip(np.ceil(idx.max(axis=0)) + 1, 0, dims - 1)
        lo = np.ceil(lo / st) * st
        return np.array([lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]], dtype=np.int64)

    def evaluate(self, transforms) -> np.ndarray:
        n = len(transforms)
        mats = np.empty((n, 3, 3))
        offs = np.empty((n, 3))
        boxes = np.empty((n, 6), dtype=np.int64)
        for p, T in enumerate(transforms):
            mats[p], offs[p] = index_affine(T, self.f_pri, self.f_unc)
            boxes[p] = self._box(T)
        out = np.empty(n)
        _objective_batch(
            self.f_pri.data, self.mpri, self.live, self.a_idx, self.a_val, self.a_mask, self.in_a,
            mats, offs, boxes, self.params.stride, float(self.params.penalty_factor), out,
        )
        return out


def objective(theta: RigidTransform, f_unc: Volume3D, f_pri: Volume3D,
              params: RegistrationObjectiveParams) -> float:
    """Penalized L1 distance between ``f_unc`` and ``f_pri`` moved by ``theta``.

    Sums ``p_i * |f_unc_i - T(f_pri)_i|`` over the stride-sampled voxels of the
    uncorrected grid, with ``p_i = penalty_factor`` where the bone mask of
    ``f_unc`` and the nearest-neighbour transported prior mask disagree.
    """
    return float(_ObjectiveData(f_unc, f_pri, params).evaluate([theta])[0])


# --------------------------------------------------------------------------
# hybrid particle swarm
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SwarmConfig:
    """Hybrid PSO settings.  ``bounds`` is a ``(n_params, 2)`` array of ``[lo, hi]`` rows."""

    n_particles: int = 64
    n_generations: int = 300
    bounds: np.ndarray = field(default_factory=lambda: default_bounds())
    w: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    seed: int = 0

    def __post_init__(self):
        b = np.array(self.bounds, dtype=np.float64, copy=True)
        if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
            raise ValueError("bounds must have shape (n_params, 2)")
        if not np.all(np.isfinite(b)) or np.any(b[:, 1] <= b[:, 0]):
            raise ValueError("bounds must be finite with lo < hi")
        b.setflags(write=False)
        object.__setattr__(self, "bounds", b)
        if self.n_particles < 10 or self.n_particles % 2:
            raise ValueError("n_particles must be even and >= 10")
        if self.n_generations < 1:
            raise ValueError("n_generations must be >= 1")


def default_bounds(max_shift: float = 30.0, max_angle_deg: float = 15.0) -> np.ndarray:
    """Symmetric bounds: three translations (mm) then three rotations (rad)."""
    a = math.radians(max_angle_deg)
    return np.array([[-max_shift, max_shift]] * 3 + [[-a, a]] * 3)


@dataclass
class SwarmResult:
    x: np.ndarray
    fun: float
    history: list
    n_evals: int

    def __iter__(self):
        # unpacks as (theta, best value)
        return iter((self.x, self.fun))


def _param_groups(n: int) -> list:
    # translation / rotation groups for 6 rigid parameters; otherwise one group
    if n == 6:
        return [np.arange(3), np.arange(3, 6)]
    return [np.arange(n)]


def _redraw_one(x, rows, lo, hi, u_group, u_param, u_value, groups):
    for n, r in enumerate(rows):
        g = groups[min(int(u_group[n] * len(groups)), len(groups) - 1)]
        d = g[min(int(u_param[n] * len(g)), len(g) - 1)]
        x[r, d] = lo[d] + u_value[n] * (hi[d] - lo[d])


def hybrid_pso_minimize(fun, cfg: SwarmConfig, vectorized: bool = False) -> SwarmResult:
    """Minimize ``fun`` over the box ``cfg.bounds`` with a hybrid particle swarm.

    Each generation applies the constriction-coefficient velocity update, then
    tries re-drawing one random parameter (translation or rotation group with
    equal probability) for a random half of the particles; a re-drawn
    position replaces the particle's only if it is no worse.  Every third generation
    the worst half is split: its first half is re-initialized, ``ceil(3/5)`` of
    the rest get the single-parameter re-draw and the others are blended
    towards the global best.  The global best is never discarded.

    ``fun`` maps a parameter vector to a float, or with ``vectorized`` a
    ``(n, n_params)`` array to ``n`` values.  All random draws of a generation
    are made up front from a Philox stream keyed by ``cfg.seed``.
    """
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    lo, hi = cfg.bounds[:, 0], cfg.bounds[:, 1]
    span = hi - lo
    n, dim = cfg.n_particles, len(lo)
    half = n // 2
    groups = _param_groups(dim)
    n_evals = 0

    def evaluate(x):
        nonlocal n_evals
        n_evals += len(x)
        if vectorized:
            vals = np.asarray(fun(x), dtype=np.float64).reshape(len(x))
        else:
            vals = np.array([float(fun(row)) for row in x])
        return np.where(np.isnan(vals), np.inf, vals)

    x = lo + rng.random((n, dim)) * span
    v = (rng.random((n, dim)) - 0.5) * 0.2 * span
    fx = evaluate(x)
    pbest, pval = x.copy(), fx.copy()
    g = int(np.argmin(fx))
    gbest, gval = x[g].copy(), float(fx[g])
    history = [gval]

    def absorb(rows):
        nonlocal gbest, gval
        better = fx[rows] < pval[rows]
        idx = rows[better]
        pbest[idx] = x[idx]
        pval[idx] = fx[idx]
        if len(rows):
            b = rows[int(np.argmin(fx[rows]))]
            if fx[b] < gval:
                gbest, gval = x[b].copy(), float(fx[b])

    everyone = np.arange(n)
    n_worst = half
    n_reinit = n_worst // 2
    n_rest = n_worst - n_reinit
    n_perturb = math.ceil(3 * n_rest / 5)
    for gen in range(1, cfg.n_generations + 1):
        # every draw of this generation, in a fixed order
        r1 = rng.random((n, dim))
        r2 = rng.random((n, dim))
        chosen = rng.permutation(n)[:half]
        a_group, a_param, a_value = rng.random(half), rng.random(half), rng.random(half)
        reinit = rng.random((n_reinit, dim))
        b_group, b_param, b_value = rng.random(n_rest), rng.random(n_rest), rng.random(n_rest)
        lam = rng.random(n_rest)

        v = cfg.w * v + cfg.c1 * r1 * (pbest - x) + cfg.c2 * r2 * (gbest - x)
        v = np.clip(v, -span, span)
        x = x + v
        out = (x < lo) | (x > hi)
        x = np.clip(x, lo, hi)
        v[out] = 0.0
        fx = evaluate(x)
        # the single-parameter re-draw is a trial move, kept when it is no worse
        trial = x[chosen]
        _redraw_one(trial, np.arange(half), lo, hi, a_group, a_param, a_value, groups)
        f_trial = evaluate(trial)
        keep = f_trial <= fx[chosen]
        x[chosen[keep]] = trial[keep]
        fx[chosen[keep]] = f_trial[keep]
        absorb(everyone)

        if gen % 3 == 0:
            worst = np.argsort(-fx, kind="stable")[:n_worst]
            fresh = worst[:n_reinit]
            rest = worst[n_reinit:]
            x[fresh] = lo + reinit * span
            v[fresh] = 0.0
            perturbed = rest[:n_perturb]
            _redraw_one(x, perturbed, lo, hi, b_group, b_param, b_value, groups)
            crossed = rest[n_perturb:]
            lc = lam[n_perturb:][:, None]
            x[crossed] = lc * x[crossed] + (1.0 - lc) * gbest
            fx[worst] = evaluate(x[worst])
            absorb(worst)
        history.append(gval)
        if gen % 50 == 0:
            log.debug("generation %d: best %.6g", gen, gval)
    return SwarmResult(gbest, gval, history, n_evals)


# --------------------------------------------------------------------------
# registration driver
# --------------------------------------------------------------------------


@dataclass
class RegistrationResult:
    transform: RigidTransform
    value: float
    history: list
    polished: bool


def registration_params(unc: Volume3D, pri: Volume3D, penalty_factor: float = 2.0,
                        stride: int = 2) -> RegistrationObjectiveParams:
    return RegistrationObjectiveParams(extract_bone_mask(unc), extract_bone_mask(pri), penalty_factor, stride)


def register(unc: Volume3D, pri: Volume3D, cfg: SwarmConfig = SwarmConfig(),
             params: RegistrationObjectiveParams | None = None, polish: bool = True) -> RegistrationResult:
    """Rigidly align ``pri`` to ``unc`` on their bone-only volumes.

    The swarm runs at ``params.stride``; with ``polish`` a Nelder-Mead pass
    at stride 1 refines the swarm's best and is kept only if it lowers the
    full-resolution objective.  The returned transform rotates about the
    prior's grid center and maps prior world points onto the uncorrected grid.
    """
    if params is None:
        params = registration_params(unc, pri)
    f_unc = bone_only(unc, params.mask_unc)
    f_pri = bone_only(pri, params.mask_pri)
    center = tuple(pri.center)
    data = _ObjectiveData(f_unc, f_pri, params)

    def batch(thetas):
        return data.evaluate([RigidTransform.from_params(t, center) for t in thetas])

    res = hybrid_pso_minimize(batch, cfg, vectorized=True)
    best_x, best_val, polished = res.x, res.fun, False
    if polish:
        fine = data if params.stride == 1 else _ObjectiveData(f_unc, f_pri, params.with_stride(1))
        lo, hi = cfg.bounds[:, 0], cfg.bounds[:, 1]

        def single(t):
            t = np.clip(t, lo, hi)
            return float(fine.evaluate([RigidTransform.from_params(t, center)])[0])

        start_val = single(best_x)
        step = np.full(len(lo), 0.5 * min(unc.spacing))
        step[3:] = math.radians(0.5)
        simplex = np.vstack([best_x] + [best_x + np.diag(step)[d] for d in range(len(lo))])
        opt = optimize.minimize(single, best_x, method="Nelder-Mead",
                                options={"initial_simplex": simplex, "xatol": 1e-4, "fatol": 1e-9, "maxiter": 2000})
        cand = np.clip(opt.x, lo, hi)
        cand_val = single(cand)
        if cand_val < start_val:
            best_x, best_val, polished = cand, cand_val, True
        else:
            best_val = start_val
    return RegistrationResult(RigidTransform.from_params(best_x, center), float(best_val), res.history, polished)
