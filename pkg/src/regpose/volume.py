"""Image containers, rigid transforms in physical (mm) coordinates, trilinear
resampling, slice extraction, intensity moments and pyramids.

Arrays are indexed [i, j, k] with i along x; voxel (i, j, k) sits at
origin + (i, j, k) * spacing.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

from . import so3

DEFAULT_DIMS = (32, 32, 32)
DEFAULT_SPACING = 2.0

VOLUME_MAGIC = b"RPV1"


class DegenerateVolumeError(ValueError):
    pass


class AmbiguousAxesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (DEFAULT_SPACING,) * 3
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def center(self) -> np.ndarray:
        """Physical coordinates of the geometric grid center."""
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing)

    def index_to_physical(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def physical_to_index(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def grid_points(self) -> np.ndarray:
        """Physical coordinates of every voxel, shape (3, nx, ny, nz)."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing, self.origin)

    def extent_z(self) -> tuple[float, float]:
        return self.origin[2], self.origin[2] + (self.dims[2] - 1) * self.spacing[2]


@dataclass(frozen=True, eq=False)
class Slice:
    data: np.ndarray
    spacing: tuple[float, float] = (DEFAULT_SPACING,) * 2
    origin: tuple[float, float] = (0.0, 0.0)
    out_of_extent: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"slice data must be a non-empty 2D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("slice intensities must be finite")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 2 positive values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p -> R (p - center) + center + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        if not so3.is_rotation(R):
            raise ValueError("rotation is not a proper rotation matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "center", np.array(self.center, dtype=float).reshape(3))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), center)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0), center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(so3.rotvec_to_matrix(rotvec), translation, center)

    @property
    def rotvec(self) -> np.ndarray:
        return so3.matrix_to_rotvec(self.rotation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=float)
        return (p - self.center) @ self.rotation.T + self.center + self.translation

    def to_dict(self) -> dict:
        return {
            "rotvec": [float(x) for x in self.rotvec],
            "translation": [float(x) for x in self.translation],
            "center": [float(x) for x in self.center],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls.from_rotvec(d["rotvec"], d.get("translation", (0, 0, 0)), d.get("center", (0, 0, 0)))


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """Transform equal to applying t2 first, then t1. Keeps t2's center."""
    c = t2.center
    R = t1.rotation @ t2.rotation
    trans = t1.rotation @ (c + t2.translation - t1.center) + t1.center + t1.translation - c
    return RigidTransform(R, trans, c)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation, t.center)


@numba.njit(cache=True)
def _affine_trilinear(data, M, d, shape):
    """out[q] = trilinear(data, M @ q + d); zero outside [0, n-1] on any axis."""
    n0, n1, n2 = data.shape
    out = np.zeros(shape)
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                x = M[0, 0] * i + M[0, 1] * j + M[0, 2] * k + d[0]
                y = M[1, 0] * i + M[1, 1] * j + M[1, 2] * k + d[1]
                z = M[2, 0] * i + M[2, 1] * j + M[2, 2] * k + d[2]
                if x < 0.0 or y < 0.0 or z < 0.0 or x > n0 - 1 or y > n1 - 1 or z > n2 - 1:
                    continue
                x0 = min(int(np.floor(x)), n0 - 1)
                y0 = min(int(np.floor(y)), n1 - 1)
                z0 = min(int(np.floor(z)), n2 - 1)
                x1 = min(x0 + 1, n0 - 1)
                y1 = min(y0 + 1, n1 - 1)
                z1 = min(z0 + 1, n2 - 1)
                fx = x - x0
                fy = y - y0
                fz = z - z0
                c00 = data[x0, y0, z0] * (1 - fx) + data[x1, y0, z0] * fx
                c10 = data[x0, y1, z0] * (1 - fx) + data[x1, y1, z0] * fx
                c01 = data[x0, y0, z1] * (1 - fx) + data[x1, y0, z1] * fx
                c11 = data[x0, y1, z1] * (1 - fx) + data[x1, y1, z1] * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                out[i, j, k] = c0 * (1 - fz) + c1 * fz
    return out


def _index_map(vol: Volume, t: RigidTransform, scale: float = 1.0):
    """Affine map (M, d) from output voxel index to source voxel index for resample."""
    S = np.asarray(vol.spacing)
    o = np.asarray(vol.origin)
    Rt = t.rotation.T / scale
    M = (Rt * S[None, :]) / S[:, None]
    d = (Rt @ (o - t.center - t.translation) + t.center - o) / S
    return M, d


def sample_points(vol: Volume, points) -> np.ndarray:
    """Trilinear values of vol at physical points of shape (N, 3); zero outside the grid."""
    idx = vol.physical_to_index(np.asarray(points, dtype=float))
    return _sample(vol.data, idx.T)


def _sample(data: np.ndarray, index_coords: np.ndarray) -> np.ndarray:
    # order=1 is trilinear; points beyond the grid read as zero
    return ndimage.map_coordinates(data, index_coords, order=1, mode="constant", cval=0.0)


def resample(vol: Volume, t: RigidTransform, scale: float = 1.0) -> Volume:
    """Apply t to the image content on the same grid: out(p) = vol(t^-1(p)).

    `scale` optionally magnifies the content about t.center before the
    rigid motion (used for size augmentation and age pre-scaling).
    """
    M, d = _index_map(vol, t, scale)
    out = _affine_trilinear(vol.data, M, d, vol.dims)
    return vol.with_data(out)


def extract_slice(vol: Volume, t: RigidTransform, z_mm: float) -> Slice:
    """Axial plane z = z_mm of resample(vol, t), without resampling the volume."""
    spacing = vol.spacing[:2]
    origin = vol.origin[:2]
    z0, z1 = vol.extent_z()
    if not (z0 <= z_mm <= z1):
        warnings.warn(f"slice z={z_mm} mm is outside the volume extent [{z0}, {z1}]", stacklevel=2)
        return Slice(np.zeros(vol.dims[:2]), spacing, origin, out_of_extent=True)
    M, d = _index_map(vol, t)
    kz = (float(z_mm) - vol.origin[2]) / vol.spacing[2]
    d = d + M[:, 2] * kz
    out = _affine_trilinear(vol.data, M, d, (vol.dims[0], vol.dims[1], 1))[:, :, 0]
    return Slice(out, spacing, origin)


def center_of_gravity(vol: Volume | Slice) -> np.ndarray:
    w = vol.data
    total = w.sum()
    if not total > 0:
        raise DegenerateVolumeError("degenerate volume: total intensity must be positive")
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in w.shape], indexing="ij"))
    mean_idx = (idx * w).reshape(w.ndim, -1).sum(axis=1) / total
    return np.asarray(vol.origin) + mean_idx * np.asarray(vol.spacing)


def second_moments(vol: Volume) -> np.ndarray:
    """Intensity-weighted covariance of voxel positions (mm^2) about the COG."""
    cog = center_of_gravity(vol)
    pts = vol.grid_points().reshape(3, -1) - cog[:, None]
    w = vol.data.reshape(-1)
    return (pts * w) @ pts.T / w.sum()


def principal_axes(vol: Volume, rtol: float = 1e-6) -> np.ndarray:
    """Rotation whose columns are second-moment eigenvectors, largest first.

    Each column is oriented so its largest-magnitude entry is positive, then
    the last column is flipped if needed to make det = +1.
    """
    evals, evecs = np.linalg.eigh(second_moments(vol))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(abs(evals[0]), 1e-300)
    if np.min(np.abs(np.diff(evals))) <= rtol * scale:
        raise AmbiguousAxesError("ambiguous principal axes: second-moment eigenvalues are not distinct")
    for k in range(3):
        if evecs[np.argmax(np.abs(evecs[:, k])), k] < 0:
            evecs[:, k] = -evecs[:, k]
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] = -evecs[:, 2]
    return evecs


PROPER_FLIPS = tuple(np.diag(s) for s in [(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)])


def downsample(vol: Volume, factor: int) -> Volume:
    """Gaussian smoothing (sigma = 0.5 * factor voxels) then decimation."""
    if factor not in (1, 2, 4):
        raise ValueError(f"downsample factor must be 1, 2 or 4, got {factor}")
    smoothed = ndimage.gaussian_filter(vol.data, sigma=0.5 * factor, mode="constant", cval=0.0)
    # mode='constant' leaks DC at the border; renormalise by the smoothed ones-image
    norm = ndimage.gaussian_filter(np.ones(vol.dims), sigma=0.5 * factor, mode="constant", cval=0.0)
    smoothed = smoothed / norm
    out = smoothed[::factor, ::factor, ::factor]
    return Volume(out, tuple(s * factor for s in vol.spacing), vol.origin)


def downsample_slice(sl: Slice, factor: int) -> Slice:
    if factor not in (1, 2, 4):
        raise ValueError(f"downsample factor must be 1, 2 or 4, got {factor}")
    smoothed = ndimage.gaussian_filter(sl.data, sigma=0.5 * factor, mode="constant", cval=0.0)
    norm = ndimage.gaussian_filter(np.ones(sl.dims), sigma=0.5 * factor, mode="constant", cval=0.0)
    out = (smoothed / norm)[::factor, ::factor]
    return Slice(out, tuple(s * factor for s in sl.spacing), sl.origin)


# --- RPV1 file format -------------------------------------------------------

def write_volume(path, vol: Volume, sidecar: bool = False) -> None:
    """Write magic, dims (3 x u32), spacing and origin (3 x f64 each), f32 data x-fastest.

    The file is written to a temporary name and renamed into place.
    """
    path = Path(path)
    header = VOLUME_MAGIC + struct.pack("<3I", *vol.dims) + struct.pack("<3d", *vol.spacing) + struct.pack("<3d", *vol.origin)
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    _atomic_write(path, header + payload)
    if sidecar:
        meta = {"dims": list(vol.dims), "spacing": list(vol.spacing), "origin": list(vol.origin), "dtype": "float32", "order": "x-fastest"}
        _atomic_write(path.with_suffix(path.suffix + ".json"), json.dumps(meta, indent=2).encode())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not an RPV1 volume")
    dims = struct.unpack_from("<3I", raw, 4)
    spacing = struct.unpack_from("<3d", raw, 16)
    origin = struct.unpack_from("<3d", raw, 40)
    n = int(np.prod(dims))
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=64)
    if data.size != n:
        raise ValueError(f"{path}: truncated voxel data")
    return Volume(data.reshape(dims, order="F").astype(np.float64), spacing, origin)


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
