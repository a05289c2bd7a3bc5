"""Trajectory comparison: timestamp association, closed-form SE(3) alignment,
and ATE/RPE statistics. Everything here is pure and stateless.

Trajectory poses are body->global: the translation is the body's position in
the world frame, matching the on-disk format (one line per sample:
"timestamp tx ty tz qx qy qz qw", space separated, '#' for comments).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InsufficientSpan,
    MalformedRow,
    NoOverlap,
)
from .geometry import RigidTransform, UnitQuaternion, rotation_angle


class Trajectory:
    """Time-sorted pose samples (body -> global) in a named frame.

    Internally the samples are stored exactly as they travel on disk:
    positions plus unit quaternions (w, x, y, z). This keeps a read/write
    cycle bit-exact; RigidTransform views are built on demand.
    """

    def __init__(self, timestamps, poses=None, frame="world", *,
                 positions=None, quaternions_wxyz=None):
        self.timestamps = np.asarray(timestamps, dtype=float).reshape(-1)
        self.frame = frame
        if poses is not None:
            self._positions = np.stack([p.translation for p in poses]) if poses else np.zeros((0, 3))
            self._quats = np.stack([
                UnitQuaternion.from_matrix(p.rotation).as_array() for p in poses
            ]) if poses else np.zeros((0, 4))
        else:
            self._positions = np.asarray(positions, dtype=float).reshape(-1, 3)
            self._quats = np.asarray(quaternions_wxyz, dtype=float).reshape(-1, 4)
        if len(self.timestamps) != len(self._positions) or \
                len(self.timestamps) != len(self._quats):
            raise ValueError("timestamps and poses must pair up")
        if len(self.timestamps) == 0:
            raise ValueError("trajectory needs at least one sample")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        self._pose_cache = None

    def __len__(self):
        return len(self.timestamps)

    @property
    def poses(self) -> list:
        if self._pose_cache is None:
            # from_wxyz tolerates unnormalized input from external files
            self._pose_cache = [
                RigidTransform(UnitQuaternion.from_wxyz(*q).to_matrix(), p)
                for q, p in zip(self._quats, self._positions)
            ]
        return self._pose_cache

    def positions(self) -> np.ndarray:
        return self._positions.copy()

    def quaternions_wxyz(self) -> np.ndarray:
        return self._quats.copy()

    def transformed(self, t: RigidTransform) -> "Trajectory":
        """Apply a global rigid transform: each pose becomes t o pose."""
        return Trajectory(self.timestamps.copy(),
                          [t.compose(p) for p in self.poses], self.frame)


def _format_stamp(t: float) -> str:
    fixed = f"{t:.6f}"
    return fixed if float(fixed) == t else repr(t)


def write_tum(trajectory: Trajectory, path, comment=None):
    """Write in the plain-text pose-per-line format; floats are written so a
    read round-trips bit-exactly."""
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pos, quat in zip(trajectory.timestamps, trajectory.positions(),
                                trajectory.quaternions_wxyz()):
            w, x, y, z = quat
            fields = [float(v) for v in (*pos, x, y, z, w)]
            fh.write(_format_stamp(float(t)) + " "
                     + " ".join(repr(v) for v in fields) + "\n")


def read_tum(path, frame="world") -> Trajectory:
    timestamps, positions, quats = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise MalformedRow(path, lineno, f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise MalformedRow(path, lineno, str(exc)) from exc
            t, tx, ty, tz, qx, qy, qz, qw = vals
            timestamps.append(t)
            positions.append([tx, ty, tz])
            quats.append([qw, qx, qy, qz])
    if not timestamps:
        raise MalformedRow(path, 0, "no samples")
    return Trajectory(np.array(timestamps), frame=frame,
                      positions=np.array(positions), quaternions_wxyz=np.array(quats))


# --------------------------------------------------------------- association


def associate(a: Trajectory, b: Trajectory, max_dt: float):
    """Greedy nearest-timestamp pairing; each sample used at most once and
    |dt| <= max_dt. Returns a list of index pairs (i, j). Raises NoOverlap
    when nothing can be paired."""
    if max_dt <= 0:
        raise ValueError("max_dt must be positive")
    candidates = []
    for i, ta in enumerate(a.timestamps):
        j = int(np.searchsorted(b.timestamps, ta))
        for jj in (j - 1, j):
            if 0 <= jj < len(b):
                dt = abs(float(ta - b.timestamps[jj]))
                if dt <= max_dt:
                    candidates.append((dt, i, jj))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoOverlap("no timestamp pairs within max_dt")
    pairs.sort()
    return pairs


# --------------------------------------------------------------- alignment


def horn_align(pairs, with_scale=False):
    """Closed-form rigid least squares mapping source points onto targets.

    `pairs` is a sequence of (source, target) 3-vectors. Minimizes
    sum ||T(src) - tgt||^2 via centroid subtraction, SVD of the positional
    cross-covariance, and determinant sign correction. With with_scale=True
    returns (transform, scale) for the similarity variant; scale is applied
    inside the returned rotation-scale-translation composition
    T(p) = s R p + t, with the transform carrying R and t.
    """
    src = np.asarray([p[0] for p in pairs], dtype=float)
    tgt = np.asarray([p[1] for p in pairs], dtype=float)
    if len(src) < 3:
        raise DegenerateConfiguration("need >= 3 position pairs")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    sc = src - mu_s
    tc = tgt - mu_t
    cov = tc.T @ sc
    u, sing, vt = np.linalg.svd(cov)
    if sing[1] <= max(1e-12, 1e-8 * sing[0]):
        raise DegenerateConfiguration("points are collinear")
    d = np.sign(np.linalg.det(u @ vt))
    rotation = u @ np.diag([1.0, 1.0, d]) @ vt
    if with_scale:
        var_s = float((sc**2).sum())
        scale = float((sing[:2].sum() + d * sing[2]) / var_s)
        translation = mu_t - scale * rotation @ mu_s
        return RigidTransform(rotation, translation), scale
    translation = mu_t - rotation @ mu_s
    return RigidTransform(rotation, translation)


# --------------------------------------------------------------- metrics


@dataclass
class ErrorReport:
    """ATE/RPE statistics; rmse^2 == mean^2 + std^2 holds per series."""

    ate_rmse: float = math.nan
    ate_mean: float = math.nan
    ate_std: float = math.nan
    rpe_trans_rmse: float = math.nan
    rpe_trans_mean: float = math.nan
    rpe_trans_std: float = math.nan
    rpe_rot_rmse: float = math.nan  # degrees
    rpe_rot_mean: float = math.nan
    rpe_rot_std: float = math.nan
    ate_series: np.ndarray | None = None
    ate_stamps: np.ndarray | None = None
    rpe_trans_series: np.ndarray | None = None
    rpe_rot_series: np.ndarray | None = None
    rpe_stamps: np.ndarray | None = None

    def format_table(self) -> str:
        lines = []
        if not math.isnan(self.ate_rmse):
            lines.append("Absolute Trajectory Error")
            lines.append(f"  RMSE: {self.ate_rmse:.6f} m STD: {self.ate_std:.6f} m")
        if not math.isnan(self.rpe_trans_rmse):
            lines.append("Relative Pose Error")
            lines.append(
                f"  RSME_T: {self.rpe_trans_rmse:.6f} m STD_T: {self.rpe_trans_std:.6f} m "
                f"RSME_R: {self.rpe_rot_rmse:.6f} deg STD_R: {self.rpe_rot_std:.6f} deg"
            )
        return "\n".join(lines)


def _series_stats(values):
    values = np.asarray(values, dtype=float)
    rmse = float(np.sqrt(np.mean(values**2)))
    mean = float(np.mean(values))
    std = float(np.std(values))
    return rmse, mean, std


def compute_ate(est: Trajectory, gt: Trajectory, max_dt=0.02) -> ErrorReport:
    """Absolute trajectory error: align est to gt (rigid Horn fit over
    associated positions), then per-sample translation error statistics."""
    pairs = associate(est, gt, max_dt)
    est_pos = est.positions()
    gt_pos = gt.positions()
    fit = horn_align([(est_pos[i], gt_pos[j]) for i, j in pairs])
    errors = np.array([
        float(np.linalg.norm(fit.apply(est_pos[i]) - gt_pos[j])) for i, j in pairs
    ])
    rmse, mean, std = _series_stats(errors)
    return ErrorReport(
        ate_rmse=rmse, ate_mean=mean, ate_std=std,
        ate_series=errors,
        ate_stamps=np.array([est.timestamps[i] for i, _ in pairs]),
    )


def compute_rpe(est: Trajectory, gt: Trajectory, delta=1.0, delta_unit="sec",
                max_dt=0.02) -> ErrorReport:
    """Relative pose error over a fixed interval.

    delta_unit 'sec' pairs each sample with the associated sample nearest to
    t + delta; 'frame' uses a fixed index offset. The error transform is
    E = (gt_i^-1 gt_j)^-1 (est_i^-1 est_j); translational error is
    ||translation(E)||, rotational error the rotation angle in degrees.
    """
    pairs = associate(est, gt, max_dt)
    trans_err, rot_err, stamps = [], [], []
    if delta_unit == "frame":
        step = int(delta)
        if step < 1:
            raise ValueError("frame delta must be >= 1")
        index_pairs = [(a, b) for a, b in zip(pairs, pairs[step:])]
    elif delta_unit == "sec":
        times = np.array([est.timestamps[i] for i, _ in pairs])
        index_pairs = []
        for k, (i, j) in enumerate(pairs):
            target = times[k] + delta
            n = int(np.searchsorted(times, target))
            best = None
            for nn in (n - 1, n):
                if 0 <= nn < len(times) and nn > k:
                    err = abs(float(times[nn] - target))
                    if best is None or err < best[0]:
                        best = (err, nn)
            if best is not None and best[0] <= max_dt + 1e-12:
                index_pairs.append((pairs[k], pairs[best[1]]))
    else:
        raise ValueError(f"unknown delta_unit {delta_unit!r}")

    for (i0, j0), (i1, j1) in index_pairs:
        rel_est = est.poses[i0].inverse().compose(est.poses[i1])
        rel_gt = gt.poses[j0].inverse().compose(gt.poses[j1])
        err = rel_gt.inverse().compose(rel_est)
        trans_err.append(float(np.linalg.norm(err.translation)))
        rot_err.append(math.degrees(rotation_angle(err.rotation)))
        stamps.append(float(est.timestamps[i0]))
    if not trans_err:
        raise InsufficientSpan(f"no sample pairs span delta={delta} {delta_unit}")

    t_rmse, t_mean, t_std = _series_stats(trans_err)
    r_rmse, r_mean, r_std = _series_stats(rot_err)
    return ErrorReport(
        rpe_trans_rmse=t_rmse, rpe_trans_mean=t_mean, rpe_trans_std=t_std,
        rpe_rot_rmse=r_rmse, rpe_rot_mean=r_mean, rpe_rot_std=r_std,
        rpe_trans_series=np.array(trans_err), rpe_rot_series=np.array(rot_err),
        rpe_stamps=np.array(stamps),
    )


def evaluate_pair(est: Trajectory, gt: Trajectory, rpe_delta=1.0,
                  delta_unit="sec", max_dt=0.02) -> ErrorReport:
    """ATE + RPE in one report."""
    ate = compute_ate(est, gt, max_dt)
    rpe = compute_rpe(est, gt, rpe_delta, delta_unit, max_dt)
    ate.rpe_trans_rmse = rpe.rpe_trans_rmse
    ate.rpe_trans_mean = rpe.rpe_trans_mean
    ate.rpe_trans_std = rpe.rpe_trans_std
    ate.rpe_rot_rmse = rpe.rpe_rot_rmse
    ate.rpe_rot_mean = rpe.rpe_rot_mean
    ate.rpe_rot_std = rpe.rpe_rot_std
    ate.rpe_trans_series = rpe.rpe_trans_series
    ate.rpe_rot_series = rpe.rpe_rot_series
    ate.rpe_stamps = rpe.rpe_stamps
    return ate


def write_error_csv(report: ErrorReport, path):
    """Per-sample error series; columns depend on which metrics are present."""
    with open(path, "w") as fh:
        if report.ate_series is not None:
            fh.write("# timestamp ate_m\n")
            for t, e in zip(report.ate_stamps, report.ate_series):
                fh.write(f"{float(t)!r},{float(e)!r}\n")
        if report.rpe_trans_series is not None:
            fh.write("# timestamp rpe_trans_m rpe_rot_deg\n")
            for t, te, re_ in zip(report.rpe_stamps, report.rpe_trans_series,
                                  report.rpe_rot_series):
                fh.write(f"{float(t)!r},{float(te)!r},{float(re_)!r}\n")
