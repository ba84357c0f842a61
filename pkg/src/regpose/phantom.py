"""Synthetic brain-analog phantoms in a canonical pose and training/test
samples with known ground-truth transforms.

A phantom is an outer ellipsoid with three distinct semi-axes, four
off-centre inner ellipsoids of different intensity and a smooth oblique
intensity ramp, so that no non-trivial rotation or reflection maps it onto
itself.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Literal, Sequence

import numpy as np
from scipy import ndimage

from . import so3
from .volume import DEFAULT_DIMS, DEFAULT_SPACING, RigidTransform, Slice, Volume, extract_slice, resample

TEMPLATE_SEED = 0
TRAIN_AGE_RANGE = (0.9, 1.1)
YOUNG_AGE_RANGE = (0.6, 0.85)
MIDDLE_FRACTION = 0.66
CORRECTION_ROT_RANGE = np.pi / 6
CORRECTION_TRANS_RANGE = 7.0
AUG_SCALE_RANGE = (0.95, 1.05)

# outer semi-axes in mm at age_scale 1
_OUTER_AXES = np.array([24.0, 19.0, 15.0])
# inner structures: centre and semi-axes relative to the outer axes, intensity
_INNER = [
    ((0.25, 0.15, 0.10), (0.35, 0.16, 0.22), 0.15),
    ((-0.45, 0.30, -0.25), (0.22, 0.26, 0.22), 1.00),
    ((0.10, -0.45, 0.35), (0.26, 0.20, 0.16), 0.80),
    ((-0.20, -0.20, -0.50), (0.17, 0.17, 0.17), 0.35),
]
_GRADIENT_DIR = np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0)
_BASE_LEVEL = 0.55
_GRADIENT_AMPLITUDE = 0.15
_EDGE_MM = 3.0
_TISSUE_RANGE = (0.1, 1.0)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    age_scale: float = 1.0
    contrast: Literal["normal", "inverted"] = "normal"
    shape_jitter: float = 0.05

    def __post_init__(self):
        if not 0.6 <= self.age_scale <= 1.2:
            raise ValueError(f"age_scale must be in [0.6, 1.2], got {self.age_scale}")
        if not 0.0 <= self.shape_jitter <= 0.15:
            raise ValueError(f"shape_jitter must be in [0, 0.15], got {self.shape_jitter}")
        if self.contrast not in ("normal", "inverted"):
            raise ValueError(f"contrast must be 'normal' or 'inverted', got {self.contrast!r}")


@dataclass(eq=False)
class TrainingSample:
    input: Volume | Slice
    gt_rotation: np.ndarray
    gt_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gt_slice_z: float | None = None
    subject_id: int = 0
    reference: Volume | None = None
    seed: int | None = None

    @property
    def gt_matrix(self) -> np.ndarray:
        return so3.rotvec_to_matrix(self.gt_rotation)

    def gt_transform(self, center) -> RigidTransform:
        return RigidTransform(self.gt_matrix, self.gt_translation, center)


def _smooth_inside(r_mm: np.ndarray, width: float) -> np.ndarray:
    """1 well inside, 0 outside, linear ramp of `width` mm across the surface."""
    return np.clip(0.5 - r_mm / width, 0.0, 1.0)


def _ellipsoid_depth(p: np.ndarray, c, axes) -> np.ndarray:
    """Signed approximate distance (mm) to an axis-aligned ellipsoid surface; negative inside."""
    q = (p - np.asarray(c)[:, None, None, None]) / np.asarray(axes)[:, None, None, None]
    r = np.sqrt((q * q).sum(axis=0))
    return (r - 1.0) * float(np.min(axes))


def generate_phantom(spec: PhantomSpec, dims=DEFAULT_DIMS, spacing: float = DEFAULT_SPACING) -> Volume:
    rng = np.random.default_rng(spec.seed)
    j = spec.shape_jitter
    grid = Volume(np.zeros(dims), (spacing,) * 3)
    p = grid.grid_points() - grid.center[:, None, None, None]

    outer = _OUTER_AXES * spec.age_scale * (1.0 + rng.uniform(-j, j, 3))
    mask = _smooth_inside(_ellipsoid_depth(p, np.zeros(3), outer), _EDGE_MM)

    rel = np.einsum("i,i...->...", _GRADIENT_DIR, p / outer[:, None, None, None])
    tissue = _BASE_LEVEL + _GRADIENT_AMPLITUDE * rel
    for c_rel, a_rel, level in _INNER:
        c = (np.asarray(c_rel) + rng.uniform(-j, j, 3) * 0.5) * outer
        a = np.asarray(a_rel) * (1.0 + rng.uniform(-j, j, 3)) * outer
        level = level + rng.uniform(-j, j) * 0.3
        w = _smooth_inside(_ellipsoid_depth(p, c, a), _EDGE_MM)
        tissue = tissue * (1.0 - w) + level * w
    lo, hi = _TISSUE_RANGE
    tissue = np.clip(tissue, lo, hi)
    if spec.contrast == "inverted":
        tissue = (lo + hi) - tissue
    return Volume(mask * tissue, (spacing,) * 3)


def invert_contrast(vol: Volume | Slice, core_erosion: int = 3, threshold: float = 1e-6):
    """Deterministic contrast transfer undoing the `inverted` phantom contrast.

    Intensities are mask * tissue with a partial-volume mask ramp at the
    boundary, so flipping x -> (lo + hi) - x would turn the rim into a bright
    shell. Instead the tissue value of each rim voxel is taken from the
    nearest core voxel (support eroded by `core_erosion` voxels, where the
    mask is 1) and the rim mask is estimated as x / x_core.
    """
    lo, hi = _TISSUE_RANGE
    x = vol.data
    support = x > threshold
    core = ndimage.binary_erosion(support, iterations=core_erosion)
    if not core.any():
        core = support
    if not core.any():
        return type(vol)(np.zeros_like(x), vol.spacing, vol.origin)
    _, nearest = ndimage.distance_transform_edt(~core, return_indices=True)
    x_core = x[tuple(nearest)]
    mask = np.where(core, 1.0, np.clip(x / np.maximum(x_core, threshold), 0.0, 1.0))
    out = np.where(support, mask * np.clip((lo + hi) - x_core, 0.0, None), 0.0)
    return type(vol)(out, vol.spacing, vol.origin)


def template_phantom(age_scale: float = 1.0, contrast: str = "normal", dims=DEFAULT_DIMS,
                     spacing: float = DEFAULT_SPACING) -> Volume:
    """The age-matched atlas analog: canonical anatomy with no subject jitter."""
    return generate_phantom(PhantomSpec(TEMPLATE_SEED, age_scale, contrast, 0.0), dims, spacing)


def _add_noise(data: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return data
    support = data > 0
    return np.where(support, np.clip(data + rng.normal(0.0, sigma, data.shape), 0.0, None), 0.0)


def make_volume_sample(vol: Volume, rng: np.random.Generator, rotation=None, scale=None,
                       noise_sigma: float = 0.0, subject_id: int = 0) -> TrainingSample:
    """Uniformly rotated, randomly scaled copy of a canonical-pose volume.

    The scale factor in [0.95, 1.05] is augmentation only and is not part of
    the ground truth.
    """
    R = so3.sample_uniform_rotation(rng) if rotation is None else np.asarray(rotation, dtype=float)
    s = rng.uniform(*AUG_SCALE_RANGE) if scale is None else float(scale)
    out = resample(vol, RigidTransform(R, np.zeros(3), vol.center), scale=s)
    out = out.with_data(_add_noise(out.data, rng, noise_sigma))
    return TrainingSample(out, so3.matrix_to_rotvec(R), subject_id=subject_id)


def middle_z_range(vol: Volume, fraction: float = MIDDLE_FRACTION, rotation=None) -> tuple[float, float]:
    """Middle `fraction` of the object's z-extent after rotating it about the grid centre.

    The object is the support (nonzero voxels); an empty volume falls back
    to the grid extent.
    """
    support = vol.data > 0
    if support.any():
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        p = vol.grid_points()[:, support] - vol.center[:, None]
        z = R[2] @ p + vol.center[2]
        z0, z1 = float(z.min()), float(z.max())
    else:
        z0, z1 = vol.extent_z()
    margin = (1.0 - fraction) / 2.0 * (z1 - z0)
    return z0 + margin, z1 - margin


def make_slice_sample(vol: Volume, rng: np.random.Generator, rotation=None, z_mm=None,
                      noise_sigma: float = 0.0, subject_id: int = 0) -> TrainingSample:
    """Axial slice of a half-space-rotated copy, from the middle 66% of the rotated object's z-extent."""
    R = so3.sample_halfspace_rotation(rng) if rotation is None else np.asarray(rotation, dtype=float)
    z = rng.uniform(*middle_z_range(vol, rotation=R)) if z_mm is None else float(z_mm)
    sl = extract_slice(vol, RigidTransform(R, np.zeros(3), vol.center), z)
    sl = Slice(_add_noise(sl.data, rng, noise_sigma), sl.spacing, sl.origin)
    return TrainingSample(sl, so3.matrix_to_rotvec(R), gt_slice_z=z, subject_id=subject_id)


def make_correction_sample(vol: Volume, rng: np.random.Generator, reference: Volume | None = None,
                           rot_range: float = CORRECTION_ROT_RANGE,
                           trans_range: float = CORRECTION_TRANS_RANGE,
                           noise_sigma: float = 0.0, subject_id: int = 0) -> TrainingSample:
    """Small rigid perturbation: per-axis Euler angles in +-pi/6, shifts in +-7 mm."""
    R = so3.sample_euler_rotation(rng, rot_range)
    t = rng.uniform(-trans_range, trans_range, 3)
    out = resample(vol, RigidTransform(R, t, vol.center))
    out = out.with_data(_add_noise(out.data, rng, noise_sigma))
    return TrainingSample(out, so3.matrix_to_rotvec(R), t, subject_id=subject_id,
                          reference=vol if reference is None else reference)


# --- datasets -----------------------------------------------------------------

TRAIN_ID_BASE = 0
TEST_ID_BASE = 10_000


def subject_specs(split: Literal["train", "test"], n: int, seed: int = 0,
                  age_range: tuple[float, float] = TRAIN_AGE_RANGE, shape_jitter: float = 0.05,
                  contrast: str = "normal") -> list[tuple[int, PhantomSpec]]:
    """Subject ids and phantom specs; train and test ids never overlap."""
    base = TRAIN_ID_BASE if split == "train" else TEST_ID_BASE
    if n > TEST_ID_BASE - TRAIN_ID_BASE and split == "train":
        raise ValueError("too many training subjects")
    out = []
    for k in range(n):
        sid = base + k
        ss = np.random.SeedSequence([seed, sid])
        rng = np.random.default_rng(ss)
        age = float(rng.uniform(*age_range))
        phantom_seed = int(ss.generate_state(1)[0])
        out.append((sid, PhantomSpec(phantom_seed, age, contrast, shape_jitter)))
    return out


@dataclass
class Subject:
    subject_id: int
    spec: PhantomSpec
    volume: Volume
    template: Volume


def build_subjects(specs: Sequence[tuple[int, PhantomSpec]], dims=DEFAULT_DIMS,
                   spacing: float = DEFAULT_SPACING) -> list[Subject]:
    templates: dict[tuple[float, str], Volume] = {}
    subjects = []
    for sid, spec in specs:
        key = (spec.age_scale, "normal")
        if key not in templates:
            templates[key] = template_phantom(spec.age_scale, "normal", dims, spacing)
        subjects.append(Subject(sid, spec, generate_phantom(spec, dims, spacing), templates[key]))
    return subjects


def sample_seed(seed: int, epoch: int, subject_id: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, subject_id, k]).generate_state(1)[0])


@dataclass
class SampleStream:
    """On-the-fly training samples: every epoch draws fresh transforms.

    Each sample is generated from its own derived seed (recorded on the
    sample), so epochs are reproducible and order-independent.
    """

    subjects: list[Subject]
    kind: Literal["volume", "slice", "correction"]
    per_subject: int
    seed: int = 0
    noise_sigma: float = 0.01
    correction_rot_range: float = CORRECTION_ROT_RANGE
    # volume samples only: Gaussian blur with sigma ~ U(0, blur_sigma_max) voxels before the noise,
    # so the pose network does not depend on edge sharpness (resized inputs are softer)
    blur_sigma_max: float = 0.0

    def __len__(self) -> int:
        return len(self.subjects) * self.per_subject

    def make(self, subject: Subject, seed: int) -> TrainingSample:
        rng = np.random.default_rng(seed)
        if self.kind == "volume" and self.blur_sigma_max > 0:
            s = make_volume_sample(subject.volume, rng, subject_id=subject.subject_id)
            blurred = ndimage.gaussian_filter(s.input.data, rng.uniform(0.0, self.blur_sigma_max))
            s.input = s.input.with_data(_add_noise(blurred, rng, self.noise_sigma))
        elif self.kind == "volume":
            s = make_volume_sample(subject.volume, rng, noise_sigma=self.noise_sigma, subject_id=subject.subject_id)
        elif self.kind == "slice":
            s = make_slice_sample(subject.volume, rng, noise_sigma=self.noise_sigma, subject_id=subject.subject_id)
        elif self.kind == "correction":
            s = make_correction_sample(subject.volume, rng, reference=subject.template,
                                       rot_range=self.correction_rot_range,
                                       noise_sigma=self.noise_sigma, subject_id=subject.subject_id)
        else:
            raise ValueError(f"unknown sample kind {self.kind!r}")
        s.seed = seed
        return s

    def epoch(self, epoch: int) -> Iterator[TrainingSample]:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self))
        for idx in order:
            subject = self.subjects[idx // self.per_subject]
            yield self.make(subject, sample_seed(self.seed, epoch, subject.subject_id, int(idx % self.per_subject)))

    def fixed(self, epoch: int = 0) -> list[TrainingSample]:
        return list(self.epoch(epoch))


def spec_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
