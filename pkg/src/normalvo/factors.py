"""Measurement factors: stereo reprojection and tangent-plane normal residuals.

Both residuals come with analytic Jacobians with respect to a left-multiplicative
twist perturbation of the pose (ordering: translation rho, then rotation phi) and
with respect to their landmark-side variable (3D point, or the world normal).

The robust loss is a Huber norm applied to the *whitened* residual norm, so the
chi-square deltas sqrt(7.815) / sqrt(5.991) are directly meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, NonPositiveDepth, PoseSE3, skew

#: 95% chi-square quantiles for 3 and 2 degrees of freedom.
CHI2_95_3DOF = 7.815
CHI2_95_2DOF = 5.991

_SEED_X = np.array([1.0, 0.0, 0.0])
_SEED_Y = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class RobustLossConfig:
    """Huber deltas (whitened units) and the normal-constraint weight."""

    huber_delta_repro: float = math.sqrt(CHI2_95_3DOF)
    huber_delta_normal: float = math.sqrt(CHI2_95_2DOF)
    normal_weight: float = 1.0e4

    def __post_init__(self):
        if self.huber_delta_repro <= 0.0 or self.huber_delta_normal <= 0.0:
            raise ValueError("Huber deltas must be positive")
        if self.normal_weight < 0.0:
            raise ValueError("normal_weight must be non-negative")


@dataclass(frozen=True)
class StereoObservation:
    """One stereo feature measurement tied to a frame and a landmark."""

    frame_id: int
    landmark_id: int
    uL: float
    v: float
    uR: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.uL > self.uR:
            raise ValueError(
                f"stereo observation needs uL > uR, got {self.uL} <= {self.uR}"
            )
        if not self.weight > 0.0:
            raise ValueError("observation weight must be positive")
        # cache the packed measurement; profiling showed per-access allocation
        # dominating problem setup on large windows
        object.__setattr__(self, "_uvu", np.array([self.uL, self.v, self.uR]))

    @property
    def uvu(self) -> np.ndarray:
        return self._uvu


def huber(r, delta: float):
    """Huber cost and IRLS weight for scalar (or array) residual norms.

    cost   = r^2 for |r| <= delta, else 2*delta*|r| - delta^2
    weight = rho'(r) / (2 r), which is 1 in the quadratic branch (and at r=0)
             and delta/|r| in the linear branch.
    """
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    quadratic = a <= delta
    cost = np.where(quadratic, r * r, 2.0 * delta * a - delta * delta)
    with np.errstate(divide="ignore"):
        weight = np.where(quadratic, 1.0, delta / np.where(a > 0.0, a, 1.0))
    if r.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


def make_tangent_basis(frame_normal: np.ndarray) -> np.ndarray:
    """Deterministic 2x3 orthonormal basis of the plane orthogonal to n.

    Rows are b0 = n x v / ||.|| and b1 = n x b0 / ||.|| with the fixed seed
    v = (1,0,0), switching to v = (0,1,0) when |n_x| > 0.9. Built once per
    keyframe and reused for every evaluation of its normal residual.
    """
    n = np.asarray(frame_normal, dtype=float)
    if n.shape != (3,):
        raise ValueError("frame normal must have shape (3,)")
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("frame normal must be unit length")
    v = _SEED_X if abs(n[0]) <= 0.9 else _SEED_Y
    b0 = np.cross(n, v)
    b0 = b0 / np.linalg.norm(b0)
    b1 = np.cross(n, b0)
    b1 = b1 / np.linalg.norm(b1)
    return np.stack([b0, b1])


def reprojection_residual(
    K: Intrinsics, pose: PoseSE3, point: np.ndarray, measured: np.ndarray
) -> np.ndarray:
    """pi(R p + t) - (uL, v, uR); batched over leading axis when given (N,3)."""
    from .geometry import project, transform_point

    pc = transform_point(pose, point)
    return project(K, pc) - np.asarray(measured, dtype=float)


def _pixel_jacobian(K: Intrinsics, pc: np.ndarray) -> np.ndarray:
    """d pi / d p_c for camera-frame points pc (N, 3) -> (N, 3, 3)."""
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    J = np.zeros((pc.shape[0], 3, 3))
    J[:, 0, 0] = K.fx * inv_z
    J[:, 0, 2] = -K.fx * x * inv_z2
    J[:, 1, 1] = K.fy * inv_z
    J[:, 1, 2] = -K.fy * y * inv_z2
    J[:, 2, 0] = K.fx * inv_z
    J[:, 2, 2] = -K.fx * (x - K.b) * inv_z2
    return J


def reprojection_jacobians(K: Intrinsics, pose: PoseSE3, point: np.ndarray):
    """Analytic Jacobians of the reprojection residual at the current pose.

    Returns (J_pose, J_point): (3,6) and (3,3) for a single point, or
    (N,3,6) and (N,3,3) for a batch. J_pose columns follow the twist order
    (rho, phi); under the left-multiplicative update the camera-frame point
    moves as p_c + rho + phi x p_c, so J_pose = Jpi @ [I | -skew(p_c)].
    """
    point = np.asarray(point, dtype=float)
    single = point.ndim == 1
    pts = np.atleast_2d(point)
    pc = pts @ pose.R.T + pose.t
    if np.any(pc[:, 2] <= 0.0):
        raise NonPositiveDepth("point behind camera while linearizing")
    Jpi = _pixel_jacobian(K, pc)
    J_pose = np.concatenate([Jpi, -np.einsum("nij,njk->nik", Jpi, skew(pc))], axis=2)
    J_point = Jpi @ pose.R
    if single:
        return J_pose[0], J_point[0]
    return J_pose, J_point


def normal_residual(
    basis: np.ndarray,
    rotation: np.ndarray,
    world_normal: np.ndarray,
    frame_normal: np.ndarray,
) -> np.ndarray:
    """Tangent-plane residual B (R n_w/||n_w|| - n_k), shape (2,).

    Scale-invariant in the world normal; components of the difference along
    n_k are annihilated by construction of the basis.
    """
    n_w = np.asarray(world_normal, dtype=float)
    norm = np.linalg.norm(n_w)
    if norm <= 1e-6:
        raise ValueError("world normal norm must exceed 1e-6")
    d = rotation @ (n_w / norm) - np.asarray(frame_normal, dtype=float)
    return basis @ d


def normal_jacobian(basis: np.ndarray, rotation: np.ndarray, world_normal: np.ndarray):
    """Jacobians (J_phi, J_nw) of the normal residual, each 2x3.

    J_phi is with respect to the rotational half of a left-multiplicative
    twist (the translational half is identically zero); J_nw differentiates
    through the normalization of the world normal.
    """
    n_w = np.asarray(world_normal, dtype=float)
    norm = np.linalg.norm(n_w)
    if norm <= 1e-6:
        raise ValueError("world normal norm must exceed 1e-6")
    n_hat = n_w / norm
    m = rotation @ n_hat
    J_phi = -basis @ skew(m)
    J_nw = basis @ rotation @ (np.eye(3) - np.outer(n_hat, n_hat)) / norm
    return J_phi, J_nw
