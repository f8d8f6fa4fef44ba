"""Stereo visual-odometry back end.

Per frame: pose-only tracking against the current map, a keyframe decision,
and for keyframes a local bundle adjustment over the covisible neighborhood.
Surface-normal constraints enter both stages through a world-frame ground
normal that is itself optimized over the first few keyframes and then frozen.

All poses held by the estimator map world coordinates into the camera frame.
Trajectories handed back by :func:`run_sequence` are inverted to the
camera-to-world convention used by the evaluation and file formats.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .evaluation import Trajectory
from .factors import (
    CHI2_95_3DOF,
    RobustLossConfig,
    StereoObservation,
    huber,
    make_tangent_basis,
    normal_jacobian,
    normal_residual,
    reprojection_jacobians,
)
from .geometry import (
    Intrinsics,
    PoseSE3,
    apply_update,
    nearest_rotation,
    project,
    transform_point,
    triangulate,
)

logger = logging.getLogger(__name__)

_DAMPING_FLOOR = 1e-12


class TrackingLost(RuntimeError):
    """Raised when a frame cannot be localized against the map."""

    def __init__(self, frame_id: int, reason: str):
        super().__init__(f"tracking lost at frame {frame_id}: {reason}")
        self.frame_id = frame_id
        self.reason = reason


class SolverDiverged(RuntimeError):
    """Damping hit its ceiling without ever reducing the cost."""


@dataclass(frozen=True)
class SolverConfig:
    """Back-end tuning knobs; defaults match the shipped experiment setup."""

    max_iterations: int = 20
    initial_damping: float = 1e-4
    damping_increase: float = 10.0
    damping_decrease: float = 10.0
    damping_ceiling: float = 1e10
    step_tolerance: float = 1e-8
    cost_tolerance: float = 1e-10
    chi2_threshold: float = CHI2_95_3DOF
    sigma_px: float = 1.0
    min_disparity: float = 0.5
    normal_init_window: int = 10
    keyframe_gap: int = 5
    keyframe_overlap: float = 0.9
    covisibility_min_shared: int = 15
    covisibility_max_window: int = 8
    min_track_observations: int = 6
    min_inlier_fraction: float = 0.5
    cull_misses: int = 3
    max_track_failures: int = 10
    normal_in_tracking: bool = True
    loss: RobustLossConfig = field(default_factory=RobustLossConfig)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in (
            "initial_damping",
            "damping_ceiling",
            "step_tolerance",
            "cost_tolerance",
            "chi2_threshold",
            "sigma_px",
            "min_disparity",
        ):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.damping_increase <= 1.0 or self.damping_decrease <= 1.0:
            raise ValueError("damping factors must exceed 1")
        if not 0.0 < self.keyframe_overlap <= 1.0:
            raise ValueError("keyframe_overlap must be in (0, 1]")
        if not 0.0 < self.min_inlier_fraction <= 1.0:
            raise ValueError("min_inlier_fraction must be in (0, 1]")
        if self.keyframe_gap < 1 or self.normal_init_window < 0:
            raise ValueError("keyframe_gap >= 1 and normal_init_window >= 0")
        if self.covisibility_min_shared < 1 or self.min_track_observations < 3:
            raise ValueError(
                "covisibility_min_shared >= 1 and min_track_observations >= 3"
            )
        if self.cull_misses < 1:
            raise ValueError("cull_misses must be at least 1")
        if self.covisibility_max_window != 0 and self.covisibility_max_window < 2:
            raise ValueError("covisibility_max_window must be 0 (uncapped) or >= 2")
        if self.max_track_failures < 0:
            raise ValueError("max_track_failures must be non-negative")


@dataclass(frozen=True)
class FrameData:
    """Stereo measurements of one frame, keyed by feature-track id."""

    frame_id: int
    timestamp: float
    landmark_ids: np.ndarray
    measurements: np.ndarray
    frame_normal: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.landmark_ids, dtype=int)
        meas = np.asarray(self.measurements, dtype=float)
        if meas.shape != (ids.size, 3):
            raise ValueError("measurements must have shape (len(landmark_ids), 3)")
        if np.unique(ids).size != ids.size:
            raise ValueError("a frame cannot observe the same landmark twice")
        object.__setattr__(self, "landmark_ids", ids)
        object.__setattr__(self, "measurements", meas)
        if self.frame_normal is not None:
            n = np.asarray(self.frame_normal, dtype=float)
            if n.shape != (3,):
                raise ValueError("frame normal must have shape (3,)")
            object.__setattr__(self, "frame_normal", n)


@dataclass
class Keyframe:
    id: int
    frame_id: int
    timestamp: float
    pose: PoseSE3
    normal: np.ndarray | None = None
    basis: np.ndarray | None = None
    observation_ids: set = field(default_factory=set)
    fixed: bool = False
    reference_inliers: int = 0


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    observations: dict = field(default_factory=dict)  # keyframe id -> obs id
    misses: int = 0  # consecutive tracking rejections, reset on acceptance


class MapState:
    """Keyframes, landmarks, observations, and covisibility bookkeeping.

    Single-writer contract: tracking only reads; insertion, bundle-adjustment
    write-back, and outlier rejection mutate and must not run concurrently.
    """

    def __init__(self, intrinsics: Intrinsics, config: SolverConfig):
        self.intrinsics = intrinsics
        self.config = config
        self.keyframes: list[Keyframe] = []
        self.landmarks: dict[int, Landmark] = {}
        self.observations: dict[int, StereoObservation] = {}
        self.covisibility: dict[int, dict[int, int]] = {}
        self.world_normal: np.ndarray | None = None
        self.normal_init_remaining: int = config.normal_init_window
        self._next_obs_id = 0

    @property
    def normal_active(self) -> bool:
        """True while the world normal is still an optimization variable."""
        return self.world_normal is not None and self.normal_init_remaining > 0

    def add_observation(self, kf_id: int, landmark_id: int, uvu) -> int:
        lm = self.landmarks[landmark_id]
        if kf_id in lm.observations:
            raise ValueError(
                f"keyframe {kf_id} already observes landmark {landmark_id}"
            )
        obs_id = self._next_obs_id
        self._next_obs_id += 1
        self.observations[obs_id] = StereoObservation(
            frame_id=kf_id,
            landmark_id=landmark_id,
            uL=float(uvu[0]),
            v=float(uvu[1]),
            uR=float(uvu[2]),
        )
        self.keyframes[kf_id].observation_ids.add(obs_id)
        for other in lm.observations:
            self.covisibility.setdefault(kf_id, {}).setdefault(other, 0)
            self.covisibility.setdefault(other, {}).setdefault(kf_id, 0)
            self.covisibility[kf_id][other] += 1
            self.covisibility[other][kf_id] += 1
        lm.observations[kf_id] = obs_id
        return obs_id

    def remove_observation(self, obs_id: int):
        obs = self.observations.pop(obs_id)
        kf_id = obs.frame_id
        lm = self.landmarks[obs.landmark_id]
        self.keyframes[kf_id].observation_ids.discard(obs_id)
        del lm.observations[kf_id]
        for other in lm.observations:
            self.covisibility[kf_id][other] -= 1
            self.covisibility[other][kf_id] -= 1
        if not lm.observations:
            del self.landmarks[lm.id]

    def covisible_keyframes(self, kf_id: int, min_shared: int) -> list[int]:
        edges = self.covisibility.get(kf_id, {})
        return sorted(j for j, count in edges.items() if count >= min_shared)

    def covisibility_consistent(self) -> bool:
        """Recompute shared-landmark counts from scratch and compare."""
        fresh: dict[int, dict[int, int]] = {}
        for lm in self.landmarks.values():
            kfs = sorted(lm.observations)
            for a in kfs:
                for b in kfs:
                    if a != b:
                        fresh.setdefault(a, {}).setdefault(b, 0)
                        fresh[a][b] += 1
        stored = {
            k: {j: c for j, c in edges.items() if c > 0}
            for k, edges in self.covisibility.items()
        }
        stored = {k: edges for k, edges in stored.items() if edges}
        return stored == fresh


def constant_velocity_init(
    prev: PoseSE3 | None = None, prev_prev: PoseSE3 | None = None
) -> PoseSE3:
    """Extrapolated initial pose; identity when no motion history exists.

    The rotation of the extrapolation is projected back onto SO(3): the
    recursion pose -> extrapolation -> next pose would otherwise double
    accumulated orthonormality error every frame.
    """
    if prev is None:
        return PoseSE3.identity()
    if prev_prev is None:
        return prev
    extrapolated = prev.compose(prev_prev.inverse()).compose(prev)
    return PoseSE3(nearest_rotation(extrapolated.R), extrapolated.t)


@dataclass(frozen=True)
class TrackResult:
    pose: PoseSE3
    inlier_ids: np.ndarray
    outlier_ids: np.ndarray
    matched: int
    cost: float


def _whitened_norms(K, pose, points, measured, inv_sigma):
    """Row norms of whitened reprojection residuals, or None behind camera."""
    pc = points @ pose.R.T + pose.t
    if np.any(pc[:, 2] <= 0.0):
        return None, None
    r = (project(K, pc) - measured) * inv_sigma
    return r, np.linalg.norm(r, axis=1)


def track_frame(
    map_state: MapState,
    frame: FrameData,
    config: SolverConfig,
    prev_pose: PoseSE3 | None = None,
    prev_prev_pose: PoseSE3 | None = None,
) -> TrackResult:
    """Damped Gauss-Newton on the frame pose alone, landmarks fixed.

    Minimizes the robust sum of whitened reprojection residuals over the
    mapped subset of the frame's observations, plus the weighted normal
    residual when a world normal and a frame normal are both available.
    Raises TrackingLost when fewer than the minimum observations match or
    when the post-fit inlier fraction falls below the configured floor.
    """
    K = map_state.intrinsics
    mask = np.array(
        [int(i) in map_state.landmarks for i in frame.landmark_ids], dtype=bool
    )
    matched_ids = frame.landmark_ids[mask]
    if matched_ids.size < config.min_track_observations:
        raise TrackingLost(
            frame.frame_id,
            f"{matched_ids.size} mapped observations, "
            f"need {config.min_track_observations}",
        )
    points = np.array([map_state.landmarks[int(i)].position for i in matched_ids])
    measured = frame.measurements[mask]
    inv_sigma = 1.0 / config.sigma_px
    delta_r = config.loss.huber_delta_repro
    delta_n = config.loss.huber_delta_normal

    use_normal = (
        config.normal_in_tracking
        and config.loss.normal_weight > 0.0
        and map_state.world_normal is not None
        and frame.frame_normal is not None
    )
    if use_normal:
        basis = make_tangent_basis(frame.frame_normal)
        sqrt_lam = math.sqrt(config.loss.normal_weight)
        n_w = map_state.world_normal

    def evaluate(T):
        r, norms = _whitened_norms(K, T, points, measured, inv_sigma)
        if r is None:
            return np.inf, None, None, None
        cost = float(np.sum(huber(norms, delta_r)[0]))
        rn = None
        if use_normal:
            rn = sqrt_lam * normal_residual(basis, T.R, n_w, frame.frame_normal)
            cost += float(huber(np.linalg.norm(rn), delta_n)[0])
        return cost, r, norms, rn

    pose = constant_velocity_init(prev_pose, prev_prev_pose)
    cost, r, norms, rn = evaluate(pose)
    if not np.isfinite(cost):
        raise TrackingLost(frame.frame_id, "initial pose puts landmarks behind camera")

    lam = config.initial_damping
    for _ in range(config.max_iterations):
        Jp, _ = reprojection_jacobians(K, pose, points)
        Jp = Jp * inv_sigma
        w = huber(norms, delta_r)[1]
        H = np.einsum("n,nab,nac->bc", w, Jp, Jp)
        g = np.einsum("n,nab,na->b", w, Jp, r)
        if use_normal:
            Jn = np.zeros((2, 6))
            Jn[:, 3:] = sqrt_lam * normal_jacobian(basis, pose.R, n_w)[0]
            wn = huber(np.linalg.norm(rn), delta_n)[1]
            H += wn * Jn.T @ Jn
            g += wn * Jn.T @ rn

        accepted = False
        converged = False
        while lam <= config.damping_ceiling:
            damped = H + lam * np.diag(np.diag(H))
            try:
                step = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= config.damping_increase
                continue
            if not np.all(np.isfinite(step)):
                lam *= config.damping_increase
                continue
            if np.linalg.norm(step) < config.step_tolerance:
                converged = True
                break
            candidate = apply_update(step, pose)
            new_cost, new_r, new_norms, new_rn = evaluate(candidate)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                pose, cost, r, norms, rn = candidate, new_cost, new_r, new_norms, new_rn
                lam = max(lam / config.damping_decrease, _DAMPING_FLOOR)
                accepted = True
                converged = rel < config.cost_tolerance
                break
            lam *= config.damping_increase
        if converged or not accepted:
            break

    sq = norms * norms
    inlier_mask = sq <= config.chi2_threshold
    n_inliers = int(np.count_nonzero(inlier_mask))
    if n_inliers < config.min_track_observations:
        raise TrackingLost(
            frame.frame_id, f"only {n_inliers} inliers after optimization"
        )
    if n_inliers < config.min_inlier_fraction * matched_ids.size:
        raise TrackingLost(
            frame.frame_id,
            f"inlier fraction {n_inliers / matched_ids.size:.2f} below "
            f"{config.min_inlier_fraction:.2f}",
        )
    logger.debug(
        "frame %d: tracked with %d/%d inliers, cost %.6g",
        frame.frame_id,
        n_inliers,
        matched_ids.size,
        cost,
    )
    return TrackResult(
        pose=pose,
        inlier_ids=matched_ids[inlier_mask],
        outlier_ids=matched_ids[~inlier_mask],
        matched=int(matched_ids.size),
        cost=cost,
    )


def cull_landmarks(map_state: MapState, track: TrackResult, config: SolverConfig) -> int:
    """Retire landmarks that tracking keeps matching but keeps rejecting.

    A landmark founded on a corrupted stereo measurement is self-consistent
    (its single observation fits it exactly), so bundle adjustment never sees
    a residual against it; the only evidence comes from tracking, where fresh
    measurements of the true feature fail the inlier gate frame after frame.
    Genuine landmarks fail that gate independently per frame, so a run of
    ``cull_misses`` consecutive rejections marks a landmark as poisoned.
    Returns the number of landmarks removed.
    """
    for lid in track.inlier_ids:
        lm = map_state.landmarks.get(int(lid))
        if lm is not None:
            lm.misses = 0
    culled = 0
    for lid in track.outlier_ids:
        lm = map_state.landmarks.get(int(lid))
        if lm is None:
            continue
        lm.misses += 1
        if lm.misses >= config.cull_misses:
            for obs_id in list(lm.observations.values()):
                map_state.remove_observation(obs_id)
            culled += 1
    if culled:
        logger.debug("culled %d landmarks after frame tracking", culled)
    return culled


def select_keyframe(
    map_state: MapState, frame_id: int, inlier_count: int, config: SolverConfig
) -> bool:
    """Promote when overlap with the last keyframe decays or a gap elapses."""
    last = map_state.keyframes[-1]
    if frame_id - last.frame_id >= config.keyframe_gap:
        return True
    return inlier_count < config.keyframe_overlap * last.reference_inliers


def insert_keyframe(
    map_state: MapState,
    frame: FrameData,
    pose: PoseSE3,
    matched_ids,
    config: SolverConfig,
) -> Keyframe:
    """Add a keyframe: matched inliers become observations, the rest of the
    frame's measurements are triangulated into new landmarks.

    The first keyframe seeds the world normal from its own frame normal; each
    insertion burns one step of the normal-init countdown, freezing the
    world normal once it reaches zero.
    """
    K = map_state.intrinsics
    kf = Keyframe(
        id=len(map_state.keyframes),
        frame_id=frame.frame_id,
        timestamp=frame.timestamp,
        pose=pose,
        normal=frame.frame_normal,
        basis=(
            make_tangent_basis(frame.frame_normal)
            if frame.frame_normal is not None
            else None
        ),
        fixed=len(map_state.keyframes) == 0,
    )
    map_state.keyframes.append(kf)

    matched = {int(i) for i in np.asarray(matched_ids, dtype=int).ravel()}
    cam_to_world = pose.inverse()
    new_landmarks = 0
    for idx, lm_id in enumerate(frame.landmark_ids):
        lm_id = int(lm_id)
        uvu = frame.measurements[idx]
        if lm_id in matched and lm_id in map_state.landmarks:
            map_state.add_observation(kf.id, lm_id, uvu)
        elif lm_id not in map_state.landmarks:
            if uvu[0] - uvu[2] <= config.min_disparity:
                continue
            pc = triangulate(K, uvu, d_min=config.min_disparity)
            map_state.landmarks[lm_id] = Landmark(
                id=lm_id, position=transform_point(cam_to_world, pc)
            )
            map_state.add_observation(kf.id, lm_id, uvu)
            new_landmarks += 1
    kf.reference_inliers = len(kf.observation_ids)

    if kf.id == 0 and frame.frame_normal is not None:
        map_state.world_normal = pose.R.T @ frame.frame_normal
    map_state.normal_init_remaining = max(map_state.normal_init_remaining - 1, 0)
    logger.debug(
        "keyframe %d (frame %d): %d observations, %d new landmarks",
        kf.id,
        frame.frame_id,
        len(kf.observation_ids),
        new_landmarks,
    )
    return kf


def reject_outliers(
    map_state: MapState, config: SolverConfig, obs_ids=None
) -> int:
    """Drop observations whose whitened squared residual norm exceeds the
    chi-square threshold; landmarks left unobserved are deleted."""
    K = map_state.intrinsics
    if obs_ids is None:
        obs_ids = list(map_state.observations)
    inv_sigma2 = 1.0 / (config.sigma_px * config.sigma_px)
    by_kf: dict[int, list[int]] = {}
    for obs_id in sorted(obs_ids):
        obs = map_state.observations.get(obs_id)
        if obs is None:
            continue
        by_kf.setdefault(obs.frame_id, []).append(obs_id)
    doomed = []
    for kf_id, ids in by_kf.items():
        kf = map_state.keyframes[kf_id]
        group = [map_state.observations[i] for i in ids]
        points = np.array([map_state.landmarks[o.landmark_id].position for o in group])
        measured = np.array([o.uvu for o in group])
        pc = points @ kf.pose.R.T + kf.pose.t
        sq = np.full(len(ids), np.inf)
        front = pc[:, 2] > 0.0
        if np.any(front):
            r = project(K, pc[front]) - measured[front]
            sq[front] = np.einsum("ij,ij->i", r, r) * inv_sigma2
        for i, obs_id in enumerate(ids):
            if sq[i] > config.chi2_threshold:
                doomed.append(obs_id)
    for obs_id in doomed:
        map_state.remove_observation(obs_id)
    return len(doomed)


def map_cost(map_state: MapState, config: SolverConfig, kf_ids=None) -> float:
    """Robust objective over stored observations plus normal factors."""
    K = map_state.intrinsics
    if kf_ids is None:
        kf_ids = range(len(map_state.keyframes))
    inv_sigma = 1.0 / config.sigma_px
    sqrt_lam = math.sqrt(config.loss.normal_weight)
    total = 0.0
    for kf_id in kf_ids:
        kf = map_state.keyframes[kf_id]
        for obs_id in sorted(kf.observation_ids):
            obs = map_state.observations[obs_id]
            lm = map_state.landmarks[obs.landmark_id]
            r = (
                project(K, transform_point(kf.pose, lm.position)) - obs.uvu
            ) * inv_sigma
            total += float(huber(np.linalg.norm(r), config.loss.huber_delta_repro)[0])
        if (
            config.loss.normal_weight > 0.0
            and kf.basis is not None
            and map_state.world_normal is not None
        ):
            rn = sqrt_lam * normal_residual(
                kf.basis, kf.pose.R, map_state.world_normal, kf.normal
            )
            total += float(
                huber(np.linalg.norm(rn), config.loss.huber_delta_normal)[0]
            )
    return total


@dataclass(frozen=True)
class BAReport:
    window: tuple
    free_poses: int
    landmarks: int
    observations: int
    iterations: int
    accepted_steps: int
    cost_initial: float
    cost_final: float
    removed_observations: int


class _BAProblem:
    """Linearization workspace for one local bundle adjustment call.

    Holds the window structure (free poses, landmark order, observation
    index arrays) and the current state (poses, landmark positions, world
    normal). Rebuilt from the map after a mid-run outlier rejection.
    """

    def __init__(self, map_state: MapState, window_ids, config: SolverConfig):
        self.map = map_state
        self.config = config
        self.window_ids = window_ids
        kfs = map_state.keyframes

        lm_ids = set()
        for kf_id in window_ids:
            for obs_id in kfs[kf_id].observation_ids:
                lm_ids.add(map_state.observations[obs_id].landmark_id)
        self.lm_ids = sorted(lm_ids)
        self.lm_index = {lm: i for i, lm in enumerate(self.lm_ids)}

        participating = set(window_ids)
        for lm in self.lm_ids:
            participating.update(map_state.landmarks[lm].observations)
        self.free_ids = sorted(
            k for k in window_ids if not kfs[k].fixed
        )
        self.free_index = {k: i for i, k in enumerate(self.free_ids)}
        self.all_kf_ids = sorted(participating)

        obs_rows = []
        for lm in self.lm_ids:
            for kf_id, obs_id in sorted(map_state.landmarks[lm].observations.items()):
                obs_rows.append((kf_id, self.lm_index[lm], obs_id))
        if not obs_rows:
            raise ValueError("bundle adjustment window has no observations")
        self.obs_kf = np.array([row[0] for row in obs_rows], dtype=int)
        self.obs_lm = np.array([row[1] for row in obs_rows], dtype=int)
        self.obs_ids = np.array([row[2] for row in obs_rows], dtype=int)
        self.obs_uvu = np.array(
            [map_state.observations[i].uvu for i in self.obs_ids]
        )
        self.obs_free = np.array(
            [self.free_index.get(k, -1) for k in self.obs_kf], dtype=int
        )
        # per-keyframe slices for vectorized projection at a single pose
        self.by_kf = {
            k: np.flatnonzero(self.obs_kf == k) for k in self.all_kf_ids
        }
        kf_pos = {k: i for i, k in enumerate(self.all_kf_ids)}
        self._obs_kf_pos = np.array([kf_pos[k] for k in self.obs_kf], dtype=int)
        # rows are grouped by landmark already; cache segment-sum boundaries
        self._lm_starts = np.concatenate(
            [[0], np.flatnonzero(np.diff(self.obs_lm)) + 1]
        )
        self._lm_segment = self.obs_lm[self._lm_starts]
        free_rows = np.flatnonzero(self.obs_free >= 0)
        order = np.argsort(self.obs_free[free_rows], kind="stable")
        self._free_rows = free_rows[order]
        sorted_free = self.obs_free[self._free_rows]
        if self._free_rows.size:
            self._free_starts = np.concatenate(
                [[0], np.flatnonzero(np.diff(sorted_free)) + 1]
            )
            self._free_segment = sorted_free[self._free_starts]
        else:
            self._free_starts = np.zeros(0, dtype=int)
            self._free_segment = np.zeros(0, dtype=int)

        self.normal_kfs = []
        if config.loss.normal_weight > 0.0 and map_state.world_normal is not None:
            self.normal_kfs = [
                k for k in sorted(window_ids) if kfs[k].basis is not None
            ]
        self.nw_active = bool(self.normal_kfs) and map_state.normal_active

        # state
        self.poses = {k: kfs[k].pose for k in self.all_kf_ids}
        self.points = np.array(
            [map_state.landmarks[lm].position for lm in self.lm_ids]
        )
        self.n_w = (
            None if map_state.world_normal is None else map_state.world_normal.copy()
        )

    def cost(self, poses, points, n_w) -> float:
        cfg = self.config
        K = self.map.intrinsics
        R_stack = np.array([poses[k].R for k in self.all_kf_ids])
        t_stack = np.array([poses[k].t for k in self.all_kf_ids])
        idx = self._obs_kf_pos
        pc = (
            np.einsum("nij,nj->ni", R_stack[idx], points[self.obs_lm])
            + t_stack[idx]
        )
        if np.any(pc[:, 2] <= 0.0):
            return np.inf
        r = (project(K, pc) - self.obs_uvu) / cfg.sigma_px
        norms = np.linalg.norm(r, axis=1)
        total = float(np.sum(huber(norms, cfg.loss.huber_delta_repro)[0]))
        if n_w is not None and self.normal_kfs:
            sqrt_lam = math.sqrt(cfg.loss.normal_weight)
            for k in self.normal_kfs:
                kf = self.map.keyframes[k]
                rn = sqrt_lam * normal_residual(kf.basis, poses[k].R, n_w, kf.normal)
                total += float(
                    huber(np.linalg.norm(rn), cfg.loss.huber_delta_normal)[0]
                )
        return total

    def points_of(self, points, rows):
        return points[self.obs_lm[rows]]

    def write_back(self):
        for k in self.free_ids:
            self.map.keyframes[k].pose = self.poses[k]
        for lm, pos in zip(self.lm_ids, self.points):
            if lm in self.map.landmarks:
                self.map.landmarks[lm].position = pos.copy()
        if self.nw_active and self.n_w is not None:
            self.map.world_normal = self.n_w / np.linalg.norm(self.n_w)


def _ba_linearize(problem: _BAProblem):
    """Residuals, Jacobians, and robust weights at the problem's state."""
    cfg = problem.config
    K = problem.map.intrinsics
    inv_sigma = 1.0 / cfg.sigma_px
    M = problem.obs_ids.size
    r_all = np.zeros((M, 3))
    Jp_all = np.zeros((M, 3, 6))
    Jl_all = np.zeros((M, 3, 3))
    for k in problem.all_kf_ids:
        rows = problem.by_kf[k]
        if not rows.size:
            continue
        pose = problem.poses[k]
        pts = problem.points_of(problem.points, rows)
        r, _ = _whitened_norms(K, pose, pts, problem.obs_uvu[rows], inv_sigma)
        Jp, Jl = reprojection_jacobians(K, pose, pts)
        r_all[rows] = r
        Jl_all[rows] = Jl * inv_sigma
        if problem.free_index.get(k, -1) >= 0:
            Jp_all[rows] = Jp * inv_sigma
    norms = np.linalg.norm(r_all, axis=1)
    w_all = huber(norms, cfg.loss.huber_delta_repro)[1]
    return r_all, Jp_all, Jl_all, w_all


def _ba_assemble(problem: _BAProblem, r_all, Jp_all, Jl_all, w_all):
    """Accumulate the Schur-ready normal-equation blocks."""
    P = len(problem.free_ids)
    L = len(problem.lm_ids)
    extra = 1 if problem.nw_active else 0
    Hpp = np.zeros((P, 6, 6))
    gp = np.zeros((P, 6))
    Hll = np.zeros((L + extra, 3, 3))
    gl = np.zeros((L + extra, 3))
    W = np.zeros((6 * P, 3 * (L + extra)))

    wJl = w_all[:, None, None] * Jl_all
    Hll[problem._lm_segment] = np.add.reduceat(
        np.einsum("nab,nac->nbc", Jl_all, wJl), problem._lm_starts, axis=0
    )
    gl[problem._lm_segment] = np.add.reduceat(
        np.einsum("nab,na->nb", wJl, r_all), problem._lm_starts, axis=0
    )

    free = problem._free_rows
    if free.size:
        p_idx = problem.obs_free[free]
        Jp = Jp_all[free]
        wJp = w_all[free, None, None] * Jp
        Hpp[problem._free_segment] = np.add.reduceat(
            np.einsum("nab,nac->nbc", Jp, wJp), problem._free_starts, axis=0
        )
        gp[problem._free_segment] = np.add.reduceat(
            np.einsum("nab,na->nb", wJp, r_all[free]), problem._free_starts, axis=0
        )
        blocks = np.einsum("nab,nac->nbc", wJp, Jl_all[free])
        rows = 6 * p_idx[:, None, None] + np.arange(6)[None, :, None]
        cols = 3 * problem.obs_lm[free][:, None, None] + np.arange(3)[None, None, :]
        W[rows, cols] = blocks

    if problem.n_w is not None and problem.normal_kfs:
        cfg = problem.config
        sqrt_lam = math.sqrt(cfg.loss.normal_weight)
        for k in problem.normal_kfs:
            kf = problem.map.keyframes[k]
            rn = sqrt_lam * normal_residual(
                kf.basis, problem.poses[k].R, problem.n_w, kf.normal
            )
            J_phi, J_nw = normal_jacobian(kf.basis, problem.poses[k].R, problem.n_w)
            J_phi = sqrt_lam * J_phi
            J_nw = sqrt_lam * J_nw
            wn = huber(np.linalg.norm(rn), cfg.loss.huber_delta_normal)[1]
            p = problem.free_index.get(k, -1)
            if p >= 0:
                Hpp[p, 3:, 3:] += wn * J_phi.T @ J_phi
                gp[p, 3:] += wn * J_phi.T @ rn
            if problem.nw_active:
                Hll[L] += wn * J_nw.T @ J_nw
                gl[L] += wn * J_nw.T @ rn
                if p >= 0:
                    W[6 * p + 3 : 6 * p + 6, 3 * L : 3 * L + 3] += wn * J_phi.T @ J_nw
        if problem.nw_active:
            # the residual is scale-free in n_w, so its radial direction has
            # exactly zero curvature and gradient; pin it so the block inverts
            n_hat = problem.n_w / np.linalg.norm(problem.n_w)
            Hll[L] += np.trace(Hll[L]) * np.outer(n_hat, n_hat)
    return Hpp, gp, Hll, gl, W


def _ba_solve(Hpp, gp, Hll, gl, W, lam):
    """Damped Schur-complement solve; returns (pose steps, landmark steps)."""
    P = Hpp.shape[0]
    Hpp_d = Hpp + lam * (np.eye(6) * Hpp.diagonal(axis1=1, axis2=2)[:, :, None])
    Hll_d = Hll + lam * (np.eye(3) * Hll.diagonal(axis1=1, axis2=2)[:, :, None])
    Hll_inv = np.linalg.inv(Hll_d)
    if P == 0:
        dl = -np.einsum("lab,lb->la", Hll_inv, gl)
        return np.zeros((0, 6)), dl
    Lb = Hll.shape[0]
    W3 = W.reshape(6 * P, Lb, 3)
    WHinv = np.einsum("plb,lbc->plc", W3, Hll_inv).reshape(6 * P, 3 * Lb)
    Hred = -WHinv @ W.T
    for p in range(P):
        Hred[6 * p : 6 * p + 6, 6 * p : 6 * p + 6] += Hpp_d[p]
    gred = gp.ravel() - WHinv @ gl.ravel()
    dp = np.linalg.solve(Hred, -gred).reshape(P, 6)
    rhs = gl + (W.T @ dp.ravel()).reshape(Lb, 3)
    dl = -np.einsum("lab,lb->la", Hll_inv, rhs)
    return dp, dl


def local_bundle_adjustment(
    map_state: MapState, current_kf_id: int, config: SolverConfig
) -> BAReport:
    """Optimize the covisible window around one keyframe.

    Window poses float (except gauge-fixed ones), every landmark they observe
    floats, and keyframes outside the window that also see those landmarks
    contribute observations at fixed poses. The world normal joins the
    variables while its init countdown is running.

    Outliers are rejected twice: once at the incoming state before any
    refinement, and once at convergence. The first pass matters most; the
    Huber tail keeps pulling, so refining first lets a corrupted measurement
    drag its landmark to a compromise where the clean partner observation
    sits right at the chi-square boundary and the margin between inliers
    and outliers is gone. At the incoming state (tracked pose, triangulated
    or previously adjusted landmarks) that margin is widest. The reported
    initial cost is taken after the first pass, where optimization starts.
    """
    if len(map_state.keyframes) < 2:
        raise ValueError("local bundle adjustment needs at least 2 keyframes")
    neighbors = map_state.covisible_keyframes(
        current_kf_id, config.covisibility_min_shared
    )
    cap = config.covisibility_max_window
    if cap and len(neighbors) + 1 > cap:
        shared = map_state.covisibility[current_kf_id]
        neighbors = sorted(neighbors, key=lambda k: (-shared[k], k))[: cap - 1]
    window = {current_kf_id} | set(neighbors)
    problem = _BAProblem(map_state, sorted(window), config)
    cost = problem.cost(problem.poses, problem.points, problem.n_w)
    lam = config.initial_damping
    accepted = 0
    iterations = 0
    removed_total = 0
    any_accept = False

    def run_rejection() -> int:
        nonlocal problem, cost, removed_total
        problem.write_back()
        removed = reject_outliers(
            map_state, config, obs_ids=problem.obs_ids.tolist()
        )
        removed_total += removed
        logger.debug(
            "ba[%d]: rejection removed %d observations", current_kf_id, removed
        )
        if removed:
            problem = _BAProblem(map_state, problem.window_ids, config)
            cost = problem.cost(problem.poses, problem.points, problem.n_w)
        return removed

    # behind-camera observations come out with infinite residuals, so this
    # pass also clears any state the solver could not even linearize
    run_rejection()
    cost_initial = cost
    final_pass_done = False

    while iterations < config.max_iterations:
        iterations += 1
        r_all, Jp_all, Jl_all, w_all = _ba_linearize(problem)
        Hpp, gp, Hll, gl, W = _ba_assemble(problem, r_all, Jp_all, Jl_all, w_all)

        step_accepted = False
        converged = False
        while lam <= config.damping_ceiling:
            try:
                dp, dl = _ba_solve(Hpp, gp, Hll, gl, W, lam)
            except np.linalg.LinAlgError:
                lam *= config.damping_increase
                continue
            if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dl))):
                lam *= config.damping_increase
                continue
            step_norm = math.sqrt(
                float(np.sum(dp * dp)) + float(np.sum(dl * dl))
            )
            if step_norm < config.step_tolerance:
                converged = True
                break
            new_poses = dict(problem.poses)
            for i, k in enumerate(problem.free_ids):
                new_poses[k] = apply_update(dp[i], problem.poses[k])
            L = len(problem.lm_ids)
            new_points = problem.points + dl[:L]
            new_nw = problem.n_w
            if problem.nw_active:
                new_nw = problem.n_w + dl[L]
            new_cost = problem.cost(new_poses, new_points, new_nw)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                problem.poses = new_poses
                problem.points = new_points
                problem.n_w = new_nw
                cost = new_cost
                lam = max(lam / config.damping_decrease, _DAMPING_FLOOR)
                accepted += 1
                any_accept = True
                step_accepted = True
                converged = rel < config.cost_tolerance
                logger.debug(
                    "ba[%d]: iter %d accepted cost %.9g", current_kf_id, accepted, cost
                )
                break
            lam *= config.damping_increase

        if not step_accepted and not converged and not any_accept:
            raise SolverDiverged(
                f"bundle adjustment at keyframe {current_kf_id}: damping ceiling "
                f"{config.damping_ceiling:g} reached without an accepted step"
            )
        if converged or not step_accepted:
            if final_pass_done:
                break
            final_pass_done = True
            if run_rejection() == 0:
                break
            # the refined geometry exposed more outliers; resume on the
            # pruned problem

    problem.write_back()
    logger.debug(
        "ba[%d]: %d iterations, %d accepted, cost %.9g -> %.9g, removed %d",
        current_kf_id,
        iterations,
        accepted,
        cost_initial,
        cost,
        removed_total,
    )
    return BAReport(
        window=tuple(problem.window_ids),
        free_poses=len(problem.free_ids),
        landmarks=len(problem.lm_ids),
        observations=int(problem.obs_ids.size),
        iterations=iterations,
        accepted_steps=accepted,
        cost_initial=cost_initial,
        cost_final=cost,
        removed_observations=removed_total,
    )


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    timestamp: float
    keyframe_id: int | None
    tracked_pose: PoseSE3
    matched: int
    inliers: int


@dataclass(frozen=True)
class RunResult:
    trajectory: Trajectory
    map_state: MapState
    records: list


def run_sequence(frames, intrinsics: Intrinsics, config: SolverConfig) -> RunResult:
    """Track a whole observation stream through the estimator.

    The first frame bootstraps the map at the identity pose (the world frame
    is that camera frame). Keyframe poses in the returned trajectory are the
    final bundle-adjusted values; other frames keep their tracked poses. The
    trajectory is camera-to-world. Fully deterministic: no randomness enters
    the estimator.

    A frame that fails to track is retried from the previous pose (dropping
    the velocity extrapolation, whose compounded noise is the usual culprit);
    if the retry fails too the frame coasts on the motion model without
    touching the map. TrackingLost propagates only after
    ``config.max_track_failures`` consecutive coasted frames, and the raised
    exception carries the id of the first frame of the streak, where tracking
    actually broke.
    """
    map_state = MapState(intrinsics, config)
    records = []
    prev_pose = None
    prev_prev_pose = None
    lost_streak = 0
    streak_start = None
    for frame in frames:
        if not map_state.keyframes:
            pose = PoseSE3.identity()
            kf = insert_keyframe(map_state, frame, pose, (), config)
            records.append(
                FrameRecord(
                    frame_id=frame.frame_id,
                    timestamp=frame.timestamp,
                    keyframe_id=kf.id,
                    tracked_pose=pose,
                    matched=len(kf.observation_ids),
                    inliers=len(kf.observation_ids),
                )
            )
            prev_pose = pose
            continue
        try:
            result = track_frame(map_state, frame, config, prev_pose, prev_prev_pose)
        except TrackingLost:
            try:
                result = track_frame(map_state, frame, config, prev_pose, None)
                logger.debug("frame %d: recovered from previous pose", frame.frame_id)
            except TrackingLost as err:
                lost_streak += 1
                if streak_start is None:
                    streak_start = frame.frame_id
                if lost_streak > config.max_track_failures:
                    raise TrackingLost(
                        streak_start,
                        f"no recovery within {lost_streak} frames ({err})",
                    ) from err
                coasted = constant_velocity_init(prev_pose, prev_prev_pose)
                logger.debug(
                    "frame %d: coasting (%d/%d)",
                    frame.frame_id,
                    lost_streak,
                    config.max_track_failures,
                )
                records.append(
                    FrameRecord(
                        frame_id=frame.frame_id,
                        timestamp=frame.timestamp,
                        keyframe_id=None,
                        tracked_pose=coasted,
                        matched=0,
                        inliers=0,
                    )
                )
                prev_prev_pose, prev_pose = prev_pose, coasted
                continue
        lost_streak = 0
        streak_start = None
        cull_landmarks(map_state, result, config)
        kf_id = None
        if select_keyframe(
            map_state, frame.frame_id, result.inlier_ids.size, config
        ):
            kf = insert_keyframe(
                map_state, frame, result.pose, result.inlier_ids, config
            )
            kf_id = kf.id
            if len(map_state.keyframes) >= 2:
                local_bundle_adjustment(map_state, kf.id, config)
        records.append(
            FrameRecord(
                frame_id=frame.frame_id,
                timestamp=frame.timestamp,
                keyframe_id=kf_id,
                tracked_pose=result.pose,
                matched=result.matched,
                inliers=int(result.inlier_ids.size),
            )
        )
        prev_prev_pose, prev_pose = prev_pose, result.pose

    poses_out = []
    for rec in records:
        if rec.keyframe_id is not None:
            poses_out.append(map_state.keyframes[rec.keyframe_id].pose.inverse())
        else:
            poses_out.append(rec.tracked_pose.inverse())
    trajectory = Trajectory(
        np.array([rec.timestamp for rec in records]), poses_out
    )
    return RunResult(trajectory=trajectory, map_state=map_state, records=records)
