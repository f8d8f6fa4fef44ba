"""SE(3) kernel and rectified-stereo camera model.

Conventions used throughout the package:

* A pose ``T = (R, t)`` maps points INTO its frame: ``p_local = R @ p + t``.
  The estimator stores world-to-camera poses; trajectory files store the
  inverse (camera-to-world), see :mod:`normalvo.dataset`.
* Twists are 6-vectors ordered ``(rho, phi)``: translational part first,
  rotational part last, angles in radians.
* Pose updates are left-multiplicative: ``apply_update(xi, T) = exp(xi) * T``.
* Quaternions appear only at the file-format boundary, ordered (x, y, z, w).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
DEFAULT_MIN_DISPARITY = 0.5
_ORTHONORMAL_TOL = 1e-9
_NEAR_PI_MARGIN = 1e-6
# Below this angle the closed-form V / V^-1 coefficients lose digits to
# cancellation (error ~ eps/angle^2), so a truncated series is used instead.
_SERIES_ANGLE = 1e-2


class NonPositiveDepth(ValueError):
    """Point lies on or behind the principal plane (Z <= 0)."""


class DegenerateDisparity(ValueError):
    """Stereo disparity too small for a usable depth."""


class NearPiRotationWarning(RuntimeWarning):
    """Rotation angle within 1e-6 of pi; the near-pi log branch was used."""


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector (last axis for batches)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Intrinsics:
    """Rectified stereo camera: shared pinhole intrinsics plus baseline [m]."""

    fx: float
    fy: float
    cx: float
    cy: float
    b: float

    def __post_init__(self):
        for name in ("fx", "fy", "b"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"Intrinsics.{name} must be positive")


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform with rotation ``R`` (3x3) and translation ``t`` (3,).

    Arrays are copied, validated (orthonormality and det within 1e-9) and
    frozen on construction, so a PoseSE3 can be shared safely.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        t = np.array(self.t, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("PoseSE3 expects R (3,3) and t (3,)")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self * other (apply ``other`` first)."""
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)


def transform_point(pose: PoseSE3, p: np.ndarray) -> np.ndarray:
    """Apply a pose to one point (3,) or a batch (N, 3)."""
    p = np.asarray(p, dtype=float)
    return p @ pose.R.T + pose.t


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; second-order Taylor below the small-angle cutoff."""
    phi = np.asarray(phi, dtype=float)
    w = skew(phi)
    angle = np.linalg.norm(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    a2 = angle * angle
    half_sin = np.sin(0.5 * angle)
    return (
        np.eye(3)
        + (np.sin(angle) / angle) * w
        + (2.0 * half_sin * half_sin / a2) * (w @ w)
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``; warns (and stays stable) near pi."""
    R = np.asarray(R, dtype=float)
    sin_vec = 0.5 * _vee(R - R.T)  # = sin(angle) * axis
    s = np.linalg.norm(sin_vec)
    c = 0.5 * (np.trace(R) - 1.0)
    angle = np.arctan2(s, min(max(c, -1.0), 1.0))
    if angle < SMALL_ANGLE:
        return sin_vec
    if np.pi - angle < _NEAR_PI_MARGIN:
        warnings.warn(
            f"rotation angle {angle!r} is within 1e-6 of pi",
            NearPiRotationWarning,
            stacklevel=2,
        )
        # R + I == 2 n n^T at angle pi; take the strongest column as axis.
        m = R + np.eye(3)
        col = int(np.argmax(np.diag(m)))
        axis = m[:, col] / np.linalg.norm(m[:, col])
        if s > 0.0 and np.dot(axis, sin_vec) < 0.0:
            axis = -axis
        return angle * axis
    return (angle / s) * sin_vec


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    """V matrix coupling the rotational twist into the translation of exp."""
    w = skew(phi)
    angle = np.linalg.norm(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + (w @ w) / 6.0
    a2 = angle * angle
    if angle < _SERIES_ANGLE:
        b = 0.5 - a2 / 24.0 + a2 * a2 / 720.0
        c = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
    else:
        half_sin = np.sin(0.5 * angle)
        b = 2.0 * half_sin * half_sin / a2
        c = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + b * w + c * (w @ w)


def _left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    w = skew(phi)
    angle = np.linalg.norm(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + (w @ w) / 12.0
    a2 = angle * angle
    if angle < _SERIES_ANGLE:
        coef = 1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0
    else:
        half = 0.5 * angle
        half_sin = np.sin(half)
        coef = (1.0 - half * np.cos(half) / half_sin) / a2
    return np.eye(3) - 0.5 * w + coef * (w @ w)


def se3_exp(xi: np.ndarray) -> PoseSE3:
    """Exponential map of a twist (rho, phi) -> PoseSE3."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError("twist must have shape (6,)")
    rho, phi = xi[:3], xi[3:]
    return PoseSE3(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Inverse of :func:`se3_exp`. Warns near pi, result still valid."""
    phi = so3_log(pose.R)
    rho = _left_jacobian_inv(phi) @ pose.t
    return np.concatenate([rho, phi])


def nearest_rotation(R: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto SO(3) (polar factor, det +1)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def apply_update(xi: np.ndarray, pose: PoseSE3) -> PoseSE3:
    """Left-multiplicative twist update ``exp(xi) * pose``.

    The rotation is re-projected onto SO(3) so that drift from repeated
    float multiplications cannot accumulate across long update chains.
    """
    step = se3_exp(xi)
    return PoseSE3(nearest_rotation(step.R @ pose.R), step.R @ pose.t + step.t)


def project(K: Intrinsics, pc: np.ndarray) -> np.ndarray:
    """Project camera-frame points to (uL, v, uR) pixel triplets.

    pc: (3,) or (N, 3) camera-frame coordinates, Z forward.
    Raises NonPositiveDepth if any Z <= 0.
    """
    pc = np.asarray(pc, dtype=float)
    single = pc.ndim == 1
    pts = np.atleast_2d(pc)
    z = pts[:, 2]
    if np.any(z <= 0.0):
        raise NonPositiveDepth(f"depth must be positive, got min Z = {z.min()!r}")
    uL = K.fx * pts[:, 0] / z + K.cx
    v = K.fy * pts[:, 1] / z + K.cy
    uR = K.fx * (pts[:, 0] - K.b) / z + K.cx
    out = np.stack([uL, v, uR], axis=-1)
    return out[0] if single else out


def triangulate(
    K: Intrinsics, obs: np.ndarray, d_min: float = DEFAULT_MIN_DISPARITY
) -> np.ndarray:
    """Camera-frame point from a (uL, v, uR) triplet (or batch (N, 3)).

    Raises DegenerateDisparity when uL - uR <= d_min.
    """
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    m = np.atleast_2d(obs)
    d = m[:, 0] - m[:, 2]
    if np.any(d <= d_min):
        raise DegenerateDisparity(
            f"disparity must exceed {d_min} px, got min {d.min()!r}"
        )
    z = K.fx * K.b / d
    x = (m[:, 0] - K.cx) * z / K.fx
    y = (m[:, 1] - K.cy) * z / K.fy
    out = np.stack([x, y, z], axis=-1)
    return out[0] if single else out


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) with w >= 0 from a rotation matrix."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from an (x, y, z, w) quaternion (normalized here)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
