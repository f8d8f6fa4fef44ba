"""Trajectory metrics: alignment, absolute and relative drift errors.

Trajectories here are camera-to-world pose sequences (the translation of each
pose is the camera position). The absolute error of frame i is the x-y part of
the translation of ``T_i^-1 * S * T_i^gt`` after fitting the rigid alignment
``S`` (no scale) that maps ground-truth positions onto estimated positions.
The relative error compares in-plane distance traveled over a fixed frame gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PoseSE3


class TooFewPoses(ValueError):
    """Fewer than 3 matched poses; rigid alignment is underdetermined."""


class TimestampMismatch(ValueError):
    """Trajectories share no usable timestamp overlap."""


class SequenceTooShort(ValueError):
    """Trajectory shorter than the relative-error frame gap."""


@dataclass
class Trajectory:
    """Ordered (timestamp, camera-to-world pose) records."""

    timestamps: np.ndarray
    poses: list[PoseSE3]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses disagree in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0.0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])


@dataclass(frozen=True)
class MetricReport:
    """Per-frame error series [m] and its summary statistics."""

    errors: np.ndarray
    mean: float
    median: float
    rmse: float
    sd: float
    dropped: int = 0

    @classmethod
    def from_errors(cls, errors: np.ndarray, dropped: int = 0) -> "MetricReport":
        e = np.asarray(errors, dtype=float)
        if e.size == 0:
            raise ValueError("cannot summarize an empty error series")
        mean = float(np.mean(e))
        rmse = float(np.sqrt(np.mean(e * e)))
        return cls(
            errors=e,
            mean=mean,
            median=float(np.median(e)),
            rmse=rmse,
            sd=float(np.std(e)),
            dropped=dropped,
        )


def associate(est: Trajectory, gt: Trajectory):
    """Match frames by nearest timestamp within half the ground-truth period.

    Returns (est_indices, gt_indices, n_dropped) with strictly increasing
    matches; raises TimestampMismatch when nothing lines up at all.
    """
    if len(gt) >= 2:
        tol = 0.5 * float(np.median(np.diff(gt.timestamps)))
    else:
        tol = 0.5
    gt_ts = gt.timestamps
    est_idx, gt_idx = [], []
    used = -1
    for i, t in enumerate(est.timestamps):
        j = int(np.searchsorted(gt_ts, t))
        best, best_dt = None, tol
        for cand in (j - 1, j):
            if 0 <= cand < len(gt_ts):
                dt = abs(gt_ts[cand] - t)
                if dt <= best_dt:
                    best, best_dt = cand, dt
        if best is not None and best > used:
            est_idx.append(i)
            gt_idx.append(best)
            used = best
    if not est_idx:
        raise TimestampMismatch(
            "no ground-truth pose within half a frame period of any estimate"
        )
    dropped = (len(est) - len(est_idx)) + (len(gt) - len(gt_idx))
    return np.array(est_idx), np.array(gt_idx), dropped


def _fit_rigid(src: np.ndarray, dst: np.ndarray, planar: bool) -> PoseSE3:
    """Closed-form rigid S (rotation + translation, no scale): dst ~ S src.

    With planar=True the rotation is restricted to the z-axis (the flag for
    comparing trajectories that only share a ground plane)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cross = (dst - mu_d).T @ (src - mu_s)
    if planar:
        # 2D Procrustes on x-y, identity on z
        a = cross[0, 0] + cross[1, 1]
        b = cross[1, 0] - cross[0, 1]
        theta = np.arctan2(b, a)
        c, s = np.cos(theta), np.sin(theta)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    else:
        U, _, Vt = np.linalg.svd(cross)
        D = np.eye(3)
        D[2, 2] = np.sign(np.linalg.det(U @ Vt))
        R = U @ D @ Vt
    return PoseSE3(R, mu_d - R @ mu_s)


def align(est: Trajectory, gt: Trajectory, planar: bool = False) -> PoseSE3:
    """Rigid transform minimizing sum ||t_i - S t_i^gt||^2 over matched frames."""
    est_idx, gt_idx, _ = associate(est, gt)
    if len(est_idx) < 3:
        raise TooFewPoses(f"alignment needs >= 3 matched poses, got {len(est_idx)}")
    return _fit_rigid(gt.positions[gt_idx], est.positions[est_idx], planar)


def ate(
    est: Trajectory,
    gt: Trajectory,
    S: PoseSE3 | None = None,
    planar: bool = False,
) -> MetricReport:
    """Absolute trajectory error over the x-y translation components.

    Per matched frame: ``|| xy( trans(T_i^-1 S T_i^gt) ) ||``. When S is not
    supplied it is fitted internally via :func:`align`.
    """
    est_idx, gt_idx, dropped = associate(est, gt)
    if S is None:
        if len(est_idx) < 3:
            raise TooFewPoses(
                f"ATE needs >= 3 matched poses to align, got {len(est_idx)}"
            )
        S = _fit_rigid(
            gt.positions[gt_idx], est.positions[est_idx], planar
        )
    errors = np.empty(len(est_idx))
    for k, (i, j) in enumerate(zip(est_idx, gt_idx)):
        delta = est.poses[i].inverse().compose(S).compose(gt.poses[j])
        errors[k] = np.hypot(delta.t[0], delta.t[1])
    return MetricReport.from_errors(errors, dropped=dropped)


def rde(est: Trajectory, gt: Trajectory, delta: int = 20) -> MetricReport:
    """Relative distance error over a gap of ``delta`` frames.

    Per start frame i: the absolute difference of in-plane distance traveled,
    ``| ||xy(T_i^-1 T_{i+d})|| - ||xy(T_i^gt^-1 T_{i+d}^gt)|| ||``.
    """
    if delta < 1:
        raise ValueError("delta must be a positive frame count")
    est_idx, gt_idx, dropped = associate(est, gt)
    n = len(est_idx)
    if n <= delta:
        raise SequenceTooShort(
            f"need more than delta={delta} matched frames, got {n}"
        )
    errors = np.empty(n - delta)
    for k in range(n - delta):
        a = est.poses[est_idx[k]].inverse().compose(est.poses[est_idx[k + delta]])
        b = gt.poses[gt_idx[k]].inverse().compose(gt.poses[gt_idx[k + delta]])
        errors[k] = abs(np.hypot(a.t[0], a.t[1]) - np.hypot(b.t[0], b.t[1]))
    return MetricReport.from_errors(errors, dropped=dropped)


_STATS = ("mean", "median", "rmse", "sd")


def pool_reports(reports) -> MetricReport:
    """Statistics over the concatenation of several per-frame error series."""
    errors = np.concatenate([r.errors for r in reports])
    return MetricReport.from_errors(
        errors, dropped=sum(r.dropped for r in reports)
    )


def report_table(
    reports: dict,
    title: str = "ATE",
    unit: str = "m",
    total_label: str = "Total",
) -> str:
    """Side-by-side comparison table.

    ``reports`` maps method name -> {dataset name -> MetricReport}; datasets
    are pooled per method into a final Total row (statistics of the
    concatenated error series, not averages of averages).
    """
    methods = list(reports.keys())
    datasets: list[str] = []
    for per_method in reports.values():
        for name in per_method:
            if name not in datasets:
                datasets.append(name)

    col_w = 8
    name_w = max([len(total_label)] + [len(d) for d in datasets]) + 2
    lines = []
    header1 = " " * name_w
    header2 = f"{'':<{name_w}}"
    for m in methods:
        block = len(_STATS) * (col_w + 1) - 1
        header1 += "| " + m[: block - 1].center(block - 1) + " "
        header2 += "| " + " ".join(s.upper().center(col_w) for s in _STATS)[: block - 1] + " "
    sep = "-" * len(header2)
    lines += [f"{title} [{unit}]", sep, header1, header2, sep]

    def fmt_row(label, per_method_reports):
        row = f"{label:<{name_w}}"
        for rep in per_method_reports:
            if rep is None:
                row += "| " + " ".join("-".center(col_w) for _ in _STATS) + " "
            else:
                row += "| " + " ".join(
                    f"{getattr(rep, s):>{col_w}.3f}" for s in _STATS
                ) + " "
        return row

    for d in datasets:
        lines.append(fmt_row(d, [reports[m].get(d) for m in methods]))
    lines.append(sep)
    totals = []
    for m in methods:
        per = [r for r in reports[m].values() if r is not None]
        totals.append(pool_reports(per) if per else None)
    lines.append(fmt_row(total_label, totals))
    lines.append(sep)
    return "\n".join(lines) + "\n"


def report_csv(reports: dict, metric: str = "ate", total_label: str = "Total") -> str:
    """Same content as :func:`report_table` in machine-readable form.

    One row per (method, dataset) plus a pooled Total row per method; columns
    metric,method,dataset,mean,median,rmse,sd,frames,dropped.
    """
    lines = ["metric,method,dataset,mean,median,rmse,sd,frames,dropped"]

    def emit(method, dataset, rep):
        stats = ",".join(f"{getattr(rep, s):.9g}" for s in _STATS)
        lines.append(
            f"{metric},{method},{dataset},{stats},{rep.errors.size},{rep.dropped}"
        )

    for method, per_dataset in reports.items():
        for dataset, rep in per_dataset.items():
            if rep is not None:
                emit(method, dataset, rep)
        pooled = [r for r in per_dataset.values() if r is not None]
        if pooled:
            emit(method, total_label, pool_reports(pooled))
    return "\n".join(lines) + "\n"
