"""Rotation algebra on SO(3): angle-axis <-> matrix, geodesic distance and
its analytic gradient, and random rotation samplers.

Rotation vectors are 3-vectors in radians whose direction is the rotation
axis and whose norm is the angle. Matrices act on column vectors.
"""
from __future__ import annotations

import numpy as np

ORTHO_TOL = 1e-6
# arccos argument bound used when differentiating the geodesic distance
GRAD_CLAMP = 1e-7
GRAD_CAP = 1e3
_SMALL = 1e-12
_NEAR_PI = 1e-6


def skew(v) -> np.ndarray:
    """Cross-product matrix [v]x, so that skew(v) @ w == cross(v, w)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(K: np.ndarray) -> np.ndarray:
    return np.array([K[2, 1], K[0, 2], K[1, 0]])


def is_rotation(R, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.linalg.norm(R.T @ R - np.eye(3)) < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


def rotvec_to_matrix(v) -> np.ndarray:
    """Rodrigues' formula R = I + sin(t)[u]x + (1 - cos(t))[u]x^2."""
    v = np.asarray(v, dtype=float)
    theta = float(np.linalg.norm(v))
    if theta < _SMALL:
        return np.eye(3)
    K = skew(v / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def matrix_to_rotvec(R) -> np.ndarray:
    """Matrix logarithm of a rotation, returned as a rotation vector.

    The angle is taken from the trace; the axis from the antisymmetric part,
    except within 1e-6 rad of a half-turn where R + I is used instead.
    """
    R = np.asarray(R, dtype=float)
    if not is_rotation(R):
        raise ValueError("input is not a rotation matrix (orthogonality/determinant check failed)")
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(c))
    w = 0.5 * unskew(R - R.T)  # sin(theta) * axis
    s = float(np.linalg.norm(w))
    if theta < 1e-4:
        # arccos is ill-conditioned here; sin(theta) = |w| is not
        t = float(np.arcsin(min(s, 1.0)))
        return w if s < _SMALL else w * (t / s)
    if np.pi - theta > _NEAR_PI:
        return w * (theta / np.sin(theta))
    B = (R + np.eye(3)) / 2.0  # -> u u^T at theta = pi
    i = int(np.argmax(np.diag(B)))
    u = B[:, i] / np.sqrt(max(B[i, i], _SMALL))
    u /= np.linalg.norm(u)
    if s > _SMALL:
        if np.dot(u, w) < 0:
            u = -u
    elif u[np.argmax(np.abs(u))] < 0:
        u = -u
    return u * theta


def fold_rotvec(v) -> np.ndarray:
    """Map a rotation vector of any norm to the equivalent one with norm <= pi."""
    v = np.asarray(v, dtype=float)
    theta = float(np.linalg.norm(v))
    if theta <= np.pi:
        return v.copy()
    theta = np.mod(theta, 2 * np.pi)
    u = v / np.linalg.norm(v)
    if theta > np.pi:
        return -u * (2 * np.pi - theta)
    return u * theta


def geodesic_distance(Rs, Rgt) -> float:
    """Rotation angle of Rs^T Rgt, i.e. arccos((tr(Rs^T Rgt) - 1) / 2).

    Evaluated as atan2(|sin|, cos) of the relative rotation, which is the
    same function but keeps full precision near 0 and pi.
    """
    M = np.asarray(Rs, dtype=float).T @ np.asarray(Rgt, dtype=float)
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    s = np.linalg.norm(0.5 * unskew(M - M.T))
    return float(np.arctan2(s, c))


def geodesic_distance_arccos(Rs, Rgt) -> float:
    """Literal clamped-arccos evaluation of the geodesic distance."""
    M = np.asarray(Rs, dtype=float).T @ np.asarray(Rgt, dtype=float)
    return float(np.arccos(np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)))


def rotvec_jacobian(v) -> np.ndarray:
    """dR/dv_k for k = 0, 1, 2, stacked as a (3, 3, 3) array.

    Uses dR/dv_k = ([v_k v + v x ((I - R) e_k)]x / |v|^2) R, which is exact
    for any v; at v = 0 it reduces to [e_k]x.
    """
    v = np.asarray(v, dtype=float)
    t2 = float(v @ v)
    I = np.eye(3)
    if t2 < 1e-16:
        return np.stack([skew(I[k]) for k in range(3)])
    R = rotvec_to_matrix(v)
    out = np.empty((3, 3, 3))
    for k in range(3):
        a = v[k] * v + np.cross(v, (I - R)[:, k])
        out[k] = skew(a / t2) @ R
    return out


def geodesic_loss_grad(v_pred, Rgt) -> tuple[np.ndarray, bool]:
    """Gradient of geodesic_distance(rotvec_to_matrix(v_pred), Rgt) w.r.t. v_pred.

    Returns (grad, flagged). The cosine is clamped to [-1 + 1e-7, 1 - 1e-7]
    before differentiating arccos and each component is capped at 1e3;
    `flagged` is True when either safeguard was active.
    """
    v_pred = np.asarray(v_pred, dtype=float)
    Rgt = np.asarray(Rgt, dtype=float)
    Rs = rotvec_to_matrix(v_pred)
    c_raw = (np.trace(Rs.T @ Rgt) - 1.0) / 2.0
    c = np.clip(c_raw, -1.0 + GRAD_CLAMP, 1.0 - GRAD_CLAMP)
    flagged = bool(c != c_raw)
    dd_dc = -1.0 / np.sqrt(1.0 - c * c)
    J = rotvec_jacobian(v_pred)
    # dc/dv_k = 0.5 * <dRs/dv_k, Rgt>_F
    dc_dv = 0.5 * np.einsum("kij,ij->k", J, Rgt)
    g = dd_dc * dc_dv
    if np.any(np.abs(g) > GRAD_CAP):
        flagged = True
        g = np.clip(g, -GRAD_CAP, GRAD_CAP)
    return g, flagged


def rotx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def roty(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_xyz_to_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """Rotate about x, then y, then z: Rz(az) @ Ry(ay) @ Rx(ax)."""
    return rotz(az) @ roty(ay) @ rotx(ax)


def sample_uniform_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via Arvo's method.

    A random rotation about z followed by a Householder reflection onto a
    random pole; the leading minus sign restores det = +1.
    """
    x1, x2, x3 = rng.random(3)
    theta, phi, z = 2 * np.pi * x1, 2 * np.pi * x2, x3
    r = np.sqrt(z)
    V = np.array([np.cos(phi) * r, np.sin(phi) * r, np.sqrt(1.0 - z)])
    H = np.eye(3) - 2.0 * np.outer(V, V)
    return -H @ rotz(theta)


def sample_euler_rotation(rng: np.random.Generator, half_range: float) -> np.ndarray:
    ax, ay, az = rng.uniform(-half_range, half_range, size=3)
    return euler_xyz_to_matrix(ax, ay, az)


def sample_halfspace_rotation(rng: np.random.Generator) -> np.ndarray:
    """Per-axis angles i.i.d. uniform on [-pi/2, pi/2], composed x, y, z."""
    return sample_euler_rotation(rng, np.pi / 2)


def uniform_angle_cdf(theta):
    """CDF of the rotation angle of a Haar-uniform rotation: (t - sin t) / pi."""
    theta = np.asarray(theta, dtype=float)
    return (theta - np.sin(theta)) / np.pi


def format_rotvec(v) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(v, dtype=float))


def parse_rotvec(text: str) -> np.ndarray:
    vals = [float(t) for t in text.replace(",", " ").split()]
    if len(vals) != 3:
        raise ValueError(f"expected 3 numbers, got {len(vals)}")
    return np.array(vals)


def format_matrix(R) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(R, dtype=float).reshape(9))


def parse_matrix(text: str) -> np.ndarray:
    vals = [float(t) for t in text.replace(",", " ").split()]
    if len(vals) != 9:
        raise ValueError(f"expected 9 numbers, got {len(vals)}")
    return np.array(vals).reshape(3, 3)
