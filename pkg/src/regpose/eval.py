"""Binned capture-range benchmarks, translation and slice-location errors, runtimes.

A *method* maps a benchmark case to an `Estimate` of the pose of the case's
input image. Errors are geodesic distances to the ground-truth rotation,
binned by the ground-truth rotation angle.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import so3
from .phantom import (
    TRAIN_AGE_RANGE, SampleStream, Subject, TrainingSample, build_subjects, invert_contrast, subject_specs,
)
from .register import RegConfig, correct, register_svr, register_vvr
from .volume import RigidTransform, Slice, Volume, resample

VOLUME_BINS = ((0, 80), (80, 110), (110, 130), (130, 145), (145, 160), (160, 180))
SLICE_BINS = ((0, 60), (60, 80), (80, 90), (90, 100), (100, 130), (130, 180))
FAILURE_DEG = 45.0
TEST_SUBJECTS = 40
TEST_PER_SUBJECT = 10
# offset keeping benchmark transforms disjoint from training streams that share a seed
BENCH_SEED_OFFSET = 7919


@dataclass
class Case:
    """One benchmark trial.

    `image` is the input (rotated subject volume or slice); `fixed` is the
    age-matched template. For correction cases `gt_translation` holds the
    applied shift.
    """
    image: Volume | Slice
    fixed: Volume
    gt_rotation: np.ndarray
    subject_id: int
    age_scale: float
    gt_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gt_slice_z: float | None = None

    @property
    def gt_matrix(self) -> np.ndarray:
        return so3.rotvec_to_matrix(self.gt_rotation)

    @property
    def gt_angle_deg(self) -> float:
        return float(np.degrees(np.linalg.norm(self.gt_rotation)))


@dataclass
class Estimate:
    rotation: np.ndarray
    translation: np.ndarray | None = None
    slice_z: float | None = None


@dataclass
class Bench:
    kind: str
    cases: list[Case]
    seed: int
    config: dict

    def __len__(self) -> int:
        return len(self.cases)


def _cases(subjects: Sequence[Subject], kind: str, per_subject: int, seed: int, noise_sigma: float) -> list[Case]:
    stream = SampleStream(list(subjects), kind, per_subject, seed=seed + BENCH_SEED_OFFSET, noise_sigma=noise_sigma)
    by_id = {s.subject_id: s for s in subjects}
    out = []
    for s in stream.fixed():
        sub = by_id[s.subject_id]
        out.append(Case(s.input, sub.template, s.gt_rotation, s.subject_id, sub.spec.age_scale,
                        s.gt_translation, s.gt_slice_z))
    out.sort(key=lambda c: (c.subject_id, c.gt_angle_deg))
    return out


def make_bench(kind: str = "volume", n_subjects: int = TEST_SUBJECTS, per_subject: int = TEST_PER_SUBJECT,
               seed: int = 0, age_range=TRAIN_AGE_RANGE, contrast: str = "normal",
               noise_sigma: float = 0.01) -> Bench:
    """Test subjects (ids disjoint from training) with transforms drawn like the training data."""
    if kind not in ("volume", "slice", "correction"):
        raise ValueError(f"unknown bench kind {kind!r}")
    subjects = build_subjects(subject_specs("test", n_subjects, seed, age_range, contrast=contrast))
    cfg = dict(kind=kind, n_subjects=n_subjects, per_subject=per_subject, age_range=list(age_range),
               contrast=contrast, noise_sigma=noise_sigma)
    return Bench(kind, _cases(subjects, kind, per_subject, seed, noise_sigma), seed, cfg)


def map_images(bench: Bench, fn: Callable[[Case], Volume | Slice], tag: str) -> Bench:
    """Bench with every input image replaced by fn(case), e.g. a pre-scaling or contrast map."""
    cases = [Case(fn(c), c.fixed, c.gt_rotation, c.subject_id, c.age_scale, c.gt_translation, c.gt_slice_z)
             for c in bench.cases]
    return Bench(bench.kind, cases, bench.seed, {**bench.config, "pre_map": tag})


def prescale(case: Case, reference_age: float = 1.0) -> Volume:
    """Resize the input about the grid centre by reference_age / age (subject age assumed known)."""
    return resample(case.image, RigidTransform.identity(case.image.center), scale=reference_age / case.age_scale)


def contrast_premap(case: Case):
    return invert_contrast(case.image)


# --- methods ----------------------------------------------------------------------

def _pose_from_vvr(T: RigidTransform) -> Estimate:
    # T maps the rotated input back onto the template: the input's pose is T^-1
    return Estimate(T.rotation.T)


def make_method(name: str, nets: dict | None = None, reg: RegConfig | None = None,
                kind: str = "volume") -> Callable[[Case], Estimate]:
    """Method callable by name.

    Volume methods: oracle, identity, Deep, VVR-GC, VVR-PAA, VVR-Deep.
    Slice methods: oracle, identity, Deep, SVR-GC, SVR-Deep.
    Correction: Correction-Net. `nets` maps volume_pose / slice_pose /
    correction to trained networks.
    """
    nets = nets or {}
    reg = reg or RegConfig()

    def need(tag):
        if nets.get(tag) is None:
            raise LookupError(f"method {name} needs a trained {tag} network")
        return nets[tag]

    if name == "oracle":
        return _Oracle()
    if name == "identity":
        return _Identity()
    if name == "Deep":
        return _Deep(need("slice_pose" if kind == "slice" else "volume_pose"))
    if name in ("VVR-GC", "VVR-PAA"):
        return _VVR(RegConfig(**{**asdict(reg), "init": name[4:]}), None)
    if name == "VVR-Deep":
        return _VVR(RegConfig(**{**asdict(reg), "init": "Deep"}), need("volume_pose"))
    if name == "SVR-GC":
        return _SVR(RegConfig(**{**asdict(reg), "init": "GC"}), None)
    if name == "SVR-Deep":
        return _SVR(RegConfig(**{**asdict(reg), "init": "Deep"}), need("slice_pose"))
    if name == "Correction-Net":
        return _Correction(need("correction"))
    raise ValueError(f"unknown method {name!r}")


# methods are small classes rather than closures so they pickle for --jobs

class _Oracle:
    def __call__(self, case):
        return Estimate(case.gt_matrix, np.asarray(case.gt_translation, float), case.gt_slice_z)


class _Identity:
    def __call__(self, case):
        return Estimate(np.eye(3), np.zeros(3), None)


@dataclass
class _Deep:
    net: object

    def __call__(self, case):
        from .regress import image_tensor, predict
        p = predict(self.net, image_tensor([case.image]))[0]
        return Estimate(p.matrix, None, p.slice_z)


@dataclass
class _VVR:
    cfg: RegConfig
    net: object

    def __call__(self, case):
        return _pose_from_vvr(register_vvr(case.image, case.fixed, self.cfg, net=self.net).transform)


@dataclass
class _SVR:
    cfg: RegConfig
    net: object

    def __call__(self, case):
        res = register_svr(case.image, case.fixed, cfg=self.cfg, net=self.net)
        return Estimate(res.transform.rotation, None, res.slice_z)


@dataclass
class _Correction:
    net: object

    def __call__(self, case):
        T = correct(case.image, case.fixed, self.net)
        inv = T.rotation.T
        # correct() returns the inverse of the predicted perturbation; report the perturbation itself
        return Estimate(inv, -inv @ T.translation)


# --- statistics ---------------------------------------------------------------------

@dataclass
class BinRecord:
    lo: float
    hi: float
    n: int
    mean: float
    stdev: float
    median: float
    failure_rate: float


@dataclass
class ExperimentReport:
    method: str
    bins: list[BinRecord]
    seed: int
    config: dict
    translation_error_mm: dict | None = None
    slice_z: dict | None = None
    runtime_ms: dict | None = None
    samples: list[tuple[float, float]] = field(default_factory=list)

    @property
    def mean_error(self) -> float:
        return float(np.mean([e for _, e in self.samples]))

    @property
    def failure_rate(self) -> float:
        return float(np.mean([e > FAILURE_DEG for _, e in self.samples]))

    def bin(self, lo: float) -> BinRecord:
        return next(b for b in self.bins if b.lo == lo)

    def to_dict(self, include_samples: bool = False) -> dict:
        d = asdict(self)
        if not include_samples:
            d.pop("samples")
        return d


def _stats(x: Sequence[float]) -> tuple[float, float, float]:
    if not x:
        return math.nan, math.nan, math.nan
    sd = statistics.stdev(x) if len(x) > 1 else 0.0
    return float(np.mean(x)), float(sd), float(np.median(x))


def bin_errors(gt_angles_deg: Sequence[float], errors_deg: Sequence[float], bins=VOLUME_BINS) -> list[BinRecord]:
    """Per-bin statistics; bins are half-open [lo, hi) except the last, which includes hi."""
    gt = np.asarray(gt_angles_deg, dtype=float)
    err = np.asarray(errors_deg, dtype=float)
    out = []
    for i, (lo, hi) in enumerate(bins):
        m = (gt >= lo) & ((gt < hi) if i < len(bins) - 1 else (gt <= hi))
        e = err[m].tolist()
        mean, sd, med = _stats(e)
        out.append(BinRecord(lo, hi, len(e), mean, sd, med, float(np.mean(err[m] > FAILURE_DEG)) if e else math.nan))
    return out


def translation_error(t_pred, t_gt) -> float:
    """Euclidean distance (mm) between translations expressed about the same centre."""
    t_pred = getattr(t_pred, "translation", t_pred)
    t_gt = getattr(t_gt, "translation", t_gt)
    return float(np.linalg.norm(np.asarray(t_pred, float) - np.asarray(t_gt, float)))


def _run_one(args):
    method, case = args
    return method(case)


def _estimates(method, cases: Sequence[Case], jobs: int) -> list[Estimate]:
    if jobs <= 1:
        return [method(c) for c in cases]
    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(_run_one, [(method, c) for c in cases], chunksize=max(1, len(cases) // (4 * jobs))))


def evaluate_method(name: str, method, bench: Bench, jobs: int = 1) -> ExperimentReport:
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        est = _estimates(method, bench.cases, jobs)
    finally:
        torch.set_num_threads(threads)
    gt = [c.gt_angle_deg for c in bench.cases]
    err = [float(np.degrees(so3.geodesic_distance(e.rotation, c.gt_matrix))) for e, c in zip(est, bench.cases)]
    bins = SLICE_BINS if bench.kind == "slice" else VOLUME_BINS
    report = ExperimentReport(name, bin_errors(gt, err, bins), bench.seed, dict(bench.config),
                              samples=list(zip(gt, err)))
    if bench.kind == "correction":
        terr = [translation_error(e.translation, c.gt_translation) for e, c in zip(est, bench.cases)]
        tinit = [float(np.linalg.norm(c.gt_translation)) for c in bench.cases]
        mean, sd, _ = _stats(terr)
        report.translation_error_mm = dict(mean=mean, stdev=sd, initial_mean=float(np.mean(tinit)))
    if bench.kind == "slice" and all(e.slice_z is not None for e in est):
        zerr = np.abs([e.slice_z - c.gt_slice_z for e, c in zip(est, bench.cases)])
        report.slice_z = dict(mean=float(zerr.mean()), within_5mm=float(np.mean(zerr < 5.0)),
                              within_10mm=float(np.mean(zerr < 10.0)))
    return report


def _run_bench(methods: Sequence[str], bench: Bench, nets, reg, jobs) -> list[ExperimentReport]:
    reports = []
    for name in methods:
        try:
            method = make_method(name, nets, reg, bench.kind)
        except LookupError as exc:
            warnings.warn(f"skipping {name}: {exc}")
            continue
        reports.append(evaluate_method(name, method, bench, jobs))
    return reports


def run_volume_bench(methods: Sequence[str], bench: Bench | None = None, seed: int = 0, nets=None,
                     reg: RegConfig | None = None, jobs: int = 1) -> list[ExperimentReport]:
    bench = bench or make_bench("volume", seed=seed)
    if bench.kind not in ("volume", "correction"):
        raise ValueError("run_volume_bench needs a volume or correction bench")
    return _run_bench(methods, bench, nets, reg, jobs)


def run_slice_bench(methods: Sequence[str], bench: Bench | None = None, seed: int = 0, nets=None,
                    reg: RegConfig | None = None, jobs: int = 1) -> list[ExperimentReport]:
    bench = bench or make_bench("slice", seed=seed)
    if bench.kind != "slice":
        raise ValueError("run_slice_bench needs a slice bench")
    return _run_bench(methods, bench, nets, reg, jobs)


# --- runtime ------------------------------------------------------------------------

def bench_runtime(fn: Callable[[], object], n_trials: int = 20, warmup: int = 3) -> dict:
    """Single-threaded wall-clock statistics (ms) of fn(); warm-up calls excluded."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(n_trials):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
    finally:
        torch.set_num_threads(threads)
    return dict(n=n_trials, mean=float(np.mean(times)), p95=float(np.percentile(times, 95)),
                median=float(np.median(times)))


# --- output -------------------------------------------------------------------------

def reports_json(reports: Sequence[ExperimentReport], include_samples: bool = False) -> str:
    return json.dumps([r.to_dict(include_samples) for r in reports], indent=2, sort_keys=True)


def reports_csv(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "bin_lo", "bin_hi", "n", "mean_deg", "stdev_deg", "median_deg", "failure_rate"])
    for r in reports:
        for b in r.bins:
            w.writerow([r.method, b.lo, b.hi, b.n, repr(b.mean), repr(b.stdev), repr(b.median), repr(b.failure_rate)])
    return buf.getvalue()


def plot_data_csv(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "gt_angle_deg", "error_deg"])
    for r in reports:
        for g, e in r.samples:
            w.writerow([r.method, repr(g), repr(e)])
    return buf.getvalue()
