"""Acceptance criteria, each run at its stated tolerance.

Networks come from `regpose.experiments.train_models`, which trains them on
first use (about 1.5 h on one CPU core) and caches them under
.regpose_cache/ (or $REGPOSE_CACHE). Every criterion prints one PASS/FAIL
line; the lines are repeated in the terminal summary.
"""
import time
from functools import cache

import numpy as np
import pytest
from scipy import stats
from scipy.linalg import expm

from conftest import ACCEPTANCE_LINES
from smoke import run_smoke

from regpose import so3
from regpose.eval import (
    bench_runtime, contrast_premap, make_bench, make_method, map_images, prescale, run_slice_bench, run_volume_bench,
)
from regpose.experiments import train_models
from regpose.phantom import (
    YOUNG_AGE_RANGE, SampleStream, build_subjects, make_correction_sample, subject_specs, template_phantom,
)
from regpose.register import correction_pipeline, ncc
from regpose.regress import REDUCED_WIDTHS, build_network, gradient_check, image_tensor, predict
from regpose.regress.training import batch_loss
from regpose.volume import RigidTransform, resample

pytestmark = pytest.mark.slow

SEED = 0


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def has_gradient(net, samples, stage) -> bool:
    net.zero_grad()
    batch_loss(net, samples, stage, 0.01)[0].backward()
    nonzero = any(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in net.parameters())
    net.zero_grad()
    return nonzero


def per_bin(report) -> str:
    return ", ".join(f"{b.lo:g}-{b.hi:g}: {b.mean:.1f} ({b.failure_rate:.0%})" for b in report.bins)


# --- shared fixtures ----------------------------------------------------------------

@pytest.fixture(scope="module")
def models():
    return train_models()


@cache
def _volume_reports():
    m = train_models()
    bench = make_bench("volume", seed=SEED)
    out = {r.method: r for r in run_volume_bench(["identity", "Deep", "VVR-GC", "VVR-Deep"], bench, nets=m.nets())}
    (l2,) = run_volume_bench(["Deep"], bench, nets=m.nets("l2"))
    out["Deep-L2"] = l2
    return bench, out


@pytest.fixture(scope="module")
def volume_reports(models):
    return _volume_reports()[1]


def deep_mean(bench, nets) -> float:
    (r,) = run_volume_bench(["Deep"], bench, nets=nets)
    return r.mean_error


# --- 1-4: property suites -----------------------------------------------------------

def test_criterion_1_so3_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = dict(roundtrip=0.0, trace=0.0, invariance=0.0, triangle=0.0, expm=0.0)
    for _ in range(1000):
        v = rng.normal(size=3)
        v *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(v)
        R = so3.rotvec_to_matrix(v)
        worst["roundtrip"] = max(worst["roundtrip"], np.abs(so3.matrix_to_rotvec(R) - v).max())
        worst["expm"] = max(worst["expm"], np.abs(R - expm(so3.skew(v))).max())
        A, B, C, X, Y = (so3.sample_uniform_rotation(rng) for _ in range(5))
        d = so3.geodesic_distance(A, B)
        worst["trace"] = max(worst["trace"], abs(np.cos(d) - (np.trace(A.T @ B) - 1) / 2))
        worst["invariance"] = max(worst["invariance"], abs(so3.geodesic_distance(X @ A @ Y, X @ B @ Y) - d))
        worst["triangle"] = max(worst["triangle"], d - so3.geodesic_distance(A, C) - so3.geodesic_distance(C, B))
    # clamp: the literal clamped arccos form never produces NaN even past |x| = 1
    R = so3.rotvec_to_matrix(np.array([0.0, 0.0, 1e-9]))
    clamp_ok = np.isfinite(so3.geodesic_distance_arccos(R, R)) and so3.geodesic_distance(R, R) < 1e-8
    elapsed = time.perf_counter() - t0
    ok = (worst["roundtrip"] < 1e-9 and worst["expm"] < 1e-12 and worst["trace"] < 1e-9
          and worst["invariance"] < 1e-9 and worst["triangle"] <= 1e-12 and clamp_ok and elapsed < 10)
    record("1 SO(3) suite", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s")


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    h = 1e-5
    worst_loss = 0.0
    for _ in range(1000):
        Rgt = so3.sample_uniform_rotation(rng)
        while True:
            v = so3.matrix_to_rotvec(so3.sample_uniform_rotation(rng))
            theta = so3.geodesic_distance(so3.rotvec_to_matrix(v), Rgt)
            if 0.01 < theta < np.pi - 0.01 and 1e-3 < np.linalg.norm(v) < np.pi - 1e-3:
                break
        g, _ = so3.geodesic_loss_grad(v, Rgt)
        fd = np.array([(so3.geodesic_distance(so3.rotvec_to_matrix(v + e), Rgt)
                        - so3.geodesic_distance(so3.rotvec_to_matrix(v - e), Rgt)) / (2 * h) for e in h * np.eye(3)])
        worst_loss = max(worst_loss, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    subjects = build_subjects(subject_specs("train", 2, seed=SEED))
    worst_net = 0.0
    for tag, kind in (("volume_pose", "volume"), ("correction", "correction"), ("slice_pose", "slice")):
        samples = SampleStream(subjects, kind, 1, seed=SEED).fixed()
        for stage in (1, 2):
            net = build_network(tag, 1, REDUCED_WIDTHS)
            assert has_gradient(net, samples, stage), f"{tag}: all gradients vanish, check would be vacuous"
            worst_net = max(worst_net, gradient_check(net, samples, stage, max_params=60))
    elapsed = time.perf_counter() - t0
    ok = worst_loss < 1e-4 and worst_net < 1e-3 and elapsed < 120
    record("2 gradient suite", ok, f"loss gradient rel {worst_loss:.1e}, network rel {worst_net:.1e}, {elapsed:.0f} s")


def test_criterion_3_sampler_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    angles = np.array([so3.geodesic_distance(so3.sample_uniform_rotation(rng), np.eye(3)) for _ in range(100_000)])
    p = stats.kstest(angles, so3.uniform_angle_cdf).pvalue
    elapsed = time.perf_counter() - t0
    ok = abs(angles.mean() - 2.2074) < 0.01 and p > 0.01 and elapsed < 30
    record("3 sampler suite", ok, f"mean {angles.mean():.4f} rad, KS p {p:.3f}, {elapsed:.1f} s")


def test_criterion_4_resampling_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    vol = template_phantom()
    identity = np.array_equal(resample(vol, RigidTransform.identity(vol.center)).data, vol.data)
    shifted = resample(vol, RigidTransform(np.eye(3), np.array([4.0, -2.0, 6.0]), vol.center)).data
    expected = np.zeros_like(vol.data)
    expected[2:, :-1, 3:] = vol.data[:-2, 1:, :-3]
    shift = np.array_equal(shifted, expected)
    worst = 1.0
    for _ in range(20):
        T = RigidTransform(so3.sample_uniform_rotation(rng), np.zeros(3), vol.center)
        back = resample(resample(vol, T), RigidTransform(T.rotation.T, np.zeros(3), vol.center))
        worst = min(worst, ncc(back, vol))
    elapsed = time.perf_counter() - t0
    ok = identity and shift and worst > 0.98 and elapsed < 30
    record("4 resampling suite", ok, f"identity {identity}, shift {shift}, min self-inverse NCC {worst:.4f}, "
                                     f"{elapsed:.1f} s")


# --- 5: capture range ---------------------------------------------------------------

def test_criterion_5a_vvr_gc_capture_range(volume_reports):
    r = volume_reports["VVR-GC"]
    low = r.bin(0).mean
    high = [b.failure_rate for b in r.bins if b.lo >= 130]
    record("5a VVR-GC capture range", low < 5 and min(high) > 0.8, per_bin(r))


def test_criterion_5b_deep_failure_rate(volume_reports):
    r = volume_reports["Deep"]
    ok = all(b.failure_rate < 0.2 for b in r.bins if b.lo != 160)
    record("5b deep pose failure rate", ok, per_bin(r))


def test_criterion_5c_geodesic_vs_l2(volume_reports):
    geo, l2 = volume_reports["Deep"], volume_reports["Deep-L2"]
    lower = sum(g.mean < m.mean for g, m in zip(geo.bins, l2.bins))
    ok = geo.mean_error <= l2.mean_error and lower >= 3
    record("5c geodesic vs L2 fine-tuning", ok,
           f"overall {geo.mean_error:.2f} vs {l2.mean_error:.2f}, lower in {lower}/6 bins; "
           f"geodesic [{per_bin(geo)}]; L2 [{per_bin(l2)}]")


def test_criterion_5d_vvr_deep_refines(volume_reports):
    deep, vvr = volume_reports["Deep"], volume_reports["VVR-Deep"]
    ok = all(v.mean <= d.mean for v, d in zip(vvr.bins, deep.bins))
    record("5d VVR-Deep <= Deep per bin", ok, f"VVR-Deep [{per_bin(vvr)}]; Deep [{per_bin(deep)}]")


# --- 6-8 ----------------------------------------------------------------------------

def test_criterion_6_correction_net(models):
    (r,) = run_volume_bench(["Correction-Net"], make_bench("correction", seed=SEED), nets=models.nets())
    t = r.translation_error_mm
    ok = r.mean_error < 8 and t["mean"] < 3
    record("6 correction net", ok, f"geodesic {r.mean_error:.2f} deg, translation {t['mean']:.2f} mm "
                                   f"(initial {t['initial_mean']:.2f} mm)")


def test_criterion_7_slice_suite(models):
    reports = {r.method: r for r in run_slice_bench(["Deep", "SVR-GC", "SVR-Deep"], make_bench("slice", seed=SEED),
                                                    nets=models.nets())}
    within = reports["Deep"].slice_z["within_5mm"]
    gc, deep = reports["SVR-GC"], reports["SVR-Deep"]
    dominated = all(d.mean <= g.mean for d, g in zip(deep.bins, gc.bins))
    record("7 slice suite", within > 0.5 and dominated,
           f"z within 5 mm {within:.0%}; SVR-Deep [{per_bin(deep)}]; SVR-GC [{per_bin(gc)}]")


def test_criterion_8_generalization(models, volume_reports):
    nets = models.nets()
    in_range = volume_reports["Deep"].mean_error
    young = deep_mean(map_images(make_bench("volume", seed=SEED, age_range=YOUNG_AGE_RANGE), prescale, "prescale"),
                      nets)
    inverted_bench = make_bench("volume", seed=SEED, contrast="inverted")
    inverted = deep_mean(inverted_bench, nets)
    premapped = deep_mean(map_images(inverted_bench, contrast_premap, "invert"), nets)
    ok = young < 2 * in_range and inverted > 2 * in_range and premapped < 1.5 * in_range
    record("8 generalization", ok, f"in-range {in_range:.2f}, young prescaled {young:.2f} "
                                   f"({young / in_range:.2f}x), inverted {inverted:.2f} ({inverted / in_range:.2f}x), "
                                   f"premapped {premapped:.2f} ({premapped / in_range:.2f}x)")


# --- 9-10 ---------------------------------------------------------------------------

def test_criterion_9_runtime(models):
    fixed = template_phantom()
    x = image_tensor([fixed])
    forward = bench_runtime(lambda: predict(models.volume_geodesic, x), n_trials=50, warmup=5)
    moving = make_correction_sample(fixed, np.random.default_rng(SEED)).input
    init = RigidTransform.identity(fixed.center)
    pipeline = bench_runtime(lambda: correction_pipeline(moving, fixed, models.correction, init), n_trials=50, warmup=5)
    ok = forward["mean"] < 100 and pipeline["mean"] < 250
    record("9 runtime", ok, f"pose forward {forward['mean']:.1f} ms (p95 {forward['p95']:.1f}), "
                            f"correction pipeline {pipeline['mean']:.1f} ms (p95 {pipeline['p95']:.1f})")


def test_criterion_10_reproducibility(tmp_path):
    a = run_smoke(tmp_path / "a", SEED)
    b = run_smoke(tmp_path / "b", SEED)
    same = all(a[k] == b[k] for k in a)
    record("10 reproducibility", same, f"{len(a)} report files byte-identical: {same}")
