"""Intensity-based rigid registration: similarity metrics, initializers,
multi-scale gradient ascent for volume-to-volume (VVR) and slice-to-volume
(SVR) registration, and the single-pass correction network.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from . import so3
from .volume import (
    PROPER_FLIPS, RigidTransform, Slice, Volume, center_of_gravity, compose, downsample, downsample_slice,
    extract_slice, invert, principal_axes, resample,
)

NMI_BINS = 32
H_ROT = 1e-3
H_TRANS = 0.1
# mm per unit of the scaled optimisation parameters; ~ radius of the anatomy,
# so a unit step moves peripheral points about as far for rotations and shifts
TRANS_SCALE = 20.0
MIN_STEP = 1e-5


class ConstantImageError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


def _arrays(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=float)
    b = np.asarray(getattr(b, "data", b), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def ncc(a, b) -> float:
    """Pearson correlation over voxels that are nonzero in either image."""
    a, b = _arrays(a, b)
    m = (a != 0) | (b != 0)
    x, y = a[m], b[m]
    if x.size < 2:
        raise ConstantImageError("constant image: overlap mask has fewer than 2 voxels")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        raise ConstantImageError("constant image: zero intensity variance over the mask")
    return float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0))


def _bin_indices(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=np.int64)
    return np.minimum(((x - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(a, b, bins: int = NMI_BINS) -> float:
    """Studholme normalised mutual information (H(A) + H(B)) / H(A, B).

    Intensities are min-max normalised per image over the overlap mask and
    hard-binned into a bins x bins joint histogram.
    """
    a, b = _arrays(a, b)
    m = (a != 0) | (b != 0)
    if not m.any():
        raise EmptyMaskError("empty overlap mask")
    ia, ib = _bin_indices(a[m], bins), _bin_indices(b[m], bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins).astype(float)
    joint /= joint.sum()
    hab = _entropy(joint)
    if hab == 0:
        raise ConstantImageError("constant image: joint entropy is zero")
    return (_entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0))) / hab


METRICS: dict[str, Callable] = {"NCC": ncc, "NMI": nmi}


@dataclass(frozen=True)
class RegConfig:
    metric: Literal["NCC", "NMI"] = "NCC"
    levels: int = 3
    iters_per_level: int = 100
    step_init: float = 0.1
    step_shrink: float = 0.5
    lr_scale_deep_init: float = 0.25
    init: Literal["GC", "PAA", "Deep", "Provided"] = "GC"

    def __post_init__(self):
        if self.levels < 1 or self.levels > 3:
            raise ValueError("levels must be 1, 2 or 3")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")
        if self.step_init <= 0 or not 0 < self.step_shrink < 1:
            raise ValueError("step_init must be > 0 and step_shrink in (0, 1)")
        if not 0 < self.lr_scale_deep_init <= 1:
            raise ValueError("lr_scale_deep_init must be in (0, 1]")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.init not in ("GC", "PAA", "Deep", "Provided"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def factors(self) -> tuple[int, ...]:
        return (4, 2, 1)[3 - self.levels:]


@dataclass
class RegResult:
    transform: RigidTransform
    metric: float
    iterations: int
    init_metric: float
    init_transform: RigidTransform
    wall_time_ms: float = 0.0
    slice_z: float | None = None

    def to_dict(self) -> dict:
        d = self.transform.to_dict()
        d.update(final_metric=self.metric, iterations=self.iterations, wall_time_ms=self.wall_time_ms,
                 init_metric=self.init_metric)
        if self.slice_z is not None:
            d["slice_z"] = self.slice_z
        return d


# --- initialisation ---------------------------------------------------------------

def _cog_translation(R: np.ndarray, cog_moving, cog_fixed, center) -> np.ndarray:
    """Translation that sends the moving COG onto the fixed COG after rotating by R about center."""
    return np.asarray(cog_fixed) - (R @ (np.asarray(cog_moving) - center) + center)


def initialize(moving: Volume, fixed: Volume, method: str = "GC", net=None,
               metric: str = "NCC") -> RigidTransform:
    """Initial transform mapping moving onto fixed (resample(moving, T) ~ fixed).

    GC matches centres of gravity. PAA additionally aligns principal axes and
    keeps whichever of the four proper sign assignments scores best. Deep
    uses the inverse of the pose predicted for `moving` by a volume_pose
    network, with the COG-matching translation.
    """
    center = fixed.center
    cog_m, cog_f = center_of_gravity(moving), center_of_gravity(fixed)
    if method == "GC":
        return RigidTransform(np.eye(3), cog_f - cog_m, center)
    if method == "PAA":
        Em, Ef = principal_axes(moving), principal_axes(fixed)
        score = METRICS[metric]
        best, best_val = None, -math.inf
        for S in PROPER_FLIPS:
            R = Ef @ S @ Em.T
            T = RigidTransform(R, _cog_translation(R, cog_m, cog_f, center), center)
            val = score(resample(moving, T), fixed)
            if val > best_val:
                best, best_val = T, val
        return best
    if method == "Deep":
        if net is None or net.tag != "volume_pose":
            raise ValueError("Deep initialisation requires a volume_pose network")
        from .regress import image_tensor, predict
        pose = predict(net, image_tensor([moving]))[0].matrix
        R = pose.T
        return RigidTransform(R, _cog_translation(R, cog_m, cog_f, center), center)
    raise ValueError(f"unknown initialisation method {method!r}")


# --- optimiser ----------------------------------------------------------------------

def _perturb(T: RigidTransform, dw, dt) -> RigidTransform:
    """Left-multiplied rotation increment about T.center plus translation increment."""
    return RigidTransform(so3.rotvec_to_matrix(dw) @ T.rotation, T.translation + dt, T.center)


def _ascent(f: Callable, x0, hs: np.ndarray, scales: np.ndarray, step: float, shrink: float,
            max_iter: int, apply: Callable):
    """Regular-step gradient ascent with backtracking.

    `apply(x, delta)` returns the new state for a raw parameter increment.
    Gradients are central differences with per-parameter step `hs`; moves
    are taken along the normalised gradient in scaled units (raw = scaled * scales).
    """
    x, fx = x0, f(x0)
    it = 0
    n = len(hs)
    while it < max_iter and step >= MIN_STEP:
        it += 1
        g = np.empty(n)
        for k in range(n):
            e = np.zeros(n)
            e[k] = hs[k]
            g[k] = (f(apply(x, e)) - f(apply(x, -e))) / (2 * hs[k]) * scales[k]
        norm = np.linalg.norm(g)
        if not np.isfinite(norm) or norm == 0:
            break
        d = g / norm
        while step >= MIN_STEP:
            cand = apply(x, step * d * scales)
            fc = f(cand)
            if fc > fx:
                x, fx = cand, fc
                break
            step *= shrink
    return x, fx, it, step


def _safe(metric: Callable) -> Callable:
    def wrapped(a, b):
        try:
            return metric(a, b)
        except (ConstantImageError, EmptyMaskError):
            return -math.inf
    return wrapped


def register_vvr(moving: Volume, fixed: Volume, cfg: RegConfig = RegConfig(), net=None,
                 init_transform: RigidTransform | None = None) -> RegResult:
    """Coarse-to-fine rigid registration of `moving` onto `fixed`.

    Six parameters (rotation increment and translation) are optimised at
    downsample factors (4, 2, 1). Candidate transforms whose metric cannot be
    evaluated count as non-improving; a failure at the initial transform
    propagates. The result is never worse than the initialisation at full
    resolution.
    """
    t0 = time.perf_counter()
    if cfg.init == "Provided":
        if init_transform is None:
            raise ValueError("init='Provided' requires init_transform")
        T = init_transform
    else:
        T = initialize(moving, fixed, cfg.init, net, cfg.metric)
    metric = METRICS[cfg.metric]
    init_val = metric(resample(moving, T), fixed)
    T_init = T
    step = cfg.step_init * (cfg.lr_scale_deep_init if cfg.init == "Deep" else 1.0)
    hs = np.array([H_ROT] * 3 + [H_TRANS] * 3)
    scales = np.array([1.0] * 3 + [TRANS_SCALE] * 3)
    safe = _safe(metric)
    iters = 0
    for level, factor in enumerate(cfg.factors):
        m_l, f_l = downsample(moving, factor), downsample(fixed, factor)
        f = lambda tr: safe(resample(m_l, tr), f_l)
        apply = lambda tr, delta: _perturb(tr, delta[:3], delta[3:])
        T, _, it, _ = _ascent(f, T, hs, scales, step * 0.5 ** level, cfg.step_shrink, cfg.iters_per_level, apply)
        iters += it
    final_val = safe(resample(moving, T), fixed)
    if final_val < init_val:
        T, final_val = T_init, init_val
    return RegResult(T, final_val, iters, init_val, T_init, (time.perf_counter() - t0) * 1e3)


@dataclass(frozen=True)
class _SlicePose:
    T: RigidTransform
    z: float


def register_svr(slice_: Slice, fixed: Volume, z_init: float | None = None, cfg: RegConfig = RegConfig(),
                 net=None, init_transform: RigidTransform | None = None) -> RegResult:
    """Slice-to-volume registration: pose and slice height jointly maximise the metric.

    Six parameters: rotation increment, in-plane shift and slice height z.
    Translation along the slice normal is indistinguishable from a change of
    z, so it is carried by z alone and T.translation[2] stays at its initial value.

    Finds (T, z) such that extract_slice(fixed, T, z) matches the slice.
    GC init: identity rotation, z at the volume centre (unless `z_init` is
    given) and an in-plane shift matching 2D centres of gravity. Deep init:
    rotation and z predicted by a slice_pose network (requires `net`).
    """
    t0 = time.perf_counter()
    center = fixed.center
    if cfg.init == "Deep":
        if net is None or net.tag != "slice_pose":
            raise ValueError("Deep initialisation requires a slice_pose network")
        from .regress import image_tensor, predict
        pred = predict(net, image_tensor([slice_]))[0]
        R = pred.matrix
        z0, z1 = fixed.extent_z()
        z = float(np.clip(pred.slice_z, z0, z1)) if z_init is None else float(z_init)
    elif cfg.init == "Provided":
        if init_transform is None or z_init is None:
            raise ValueError("init='Provided' requires init_transform and z_init")
        R, z = init_transform.rotation, float(z_init)
    elif cfg.init == "GC":
        R = np.eye(3)
        z = float(center[2]) if z_init is None else float(z_init)
    else:
        raise ValueError(f"SVR supports GC, Deep and Provided initialisation, not {cfg.init!r}")
    if init_transform is not None and cfg.init == "Provided":
        T = init_transform
    else:
        T = RigidTransform(R, np.zeros(3), center)
        ref = extract_slice(fixed, T, z)
        if ref.data.sum() > 0 and slice_.data.sum() > 0:
            shift = center_of_gravity(slice_) - center_of_gravity(ref)
            T = RigidTransform(R, np.array([shift[0], shift[1], 0.0]), center)
    metric = METRICS[cfg.metric]
    pose = _SlicePose(T, z)
    init_val = metric(slice_, extract_slice(fixed, T, z))
    step = cfg.step_init * (cfg.lr_scale_deep_init if cfg.init == "Deep" else 1.0)
    # out-of-plane translation and z are interchangeable, so z carries it alone
    hs = np.array([H_ROT] * 3 + [H_TRANS] * 3)
    scales = np.array([1.0] * 3 + [TRANS_SCALE] * 3)
    safe = _safe(metric)
    zlo, zhi = fixed.extent_z()

    def apply(p: _SlicePose, delta):
        shift = np.array([delta[3], delta[4], 0.0])
        return _SlicePose(_perturb(p.T, delta[:3], shift), float(np.clip(p.z + delta[5], zlo, zhi)))

    iters = 0
    for level, factor in enumerate(cfg.factors):
        s_l, f_l = downsample_slice(slice_, factor), downsample(fixed, factor)
        f = lambda p: safe(s_l, extract_slice(f_l, p.T, p.z))
        pose, _, it, _ = _ascent(f, pose, hs, scales, step * 0.5 ** level, cfg.step_shrink, cfg.iters_per_level, apply)
        iters += it
    final_val = safe(slice_, extract_slice(fixed, pose.T, pose.z))
    T_init = T
    if final_val < init_val:
        pose, final_val = _SlicePose(T_init, z), init_val
    return RegResult(pose.T, final_val, iters, init_val, T_init, (time.perf_counter() - t0) * 1e3, slice_z=pose.z)


def correct(moving: Volume, fixed: Volume, net) -> RigidTransform:
    """One forward pass of the correction network: transform mapping moving onto fixed."""
    if net is None or net.tag != "correction":
        raise ValueError("correct() requires a correction network")
    from .regress import image_tensor, predict
    pred = predict(net, image_tensor([moving], reference=fixed))[0]
    perturbation = RigidTransform(pred.matrix, pred.translation, fixed.center)
    return invert(perturbation)


def correction_pipeline(moving: Volume, fixed: Volume, corr_net, init: RigidTransform | None = None) -> RigidTransform:
    """Resample moving by `init` (e.g. a deep pose initialisation) then apply the correction net."""
    if init is None:
        init = RigidTransform.identity(fixed.center)
    rough = resample(moving, init)
    return compose(correct(rough, fixed, corr_net), init)
