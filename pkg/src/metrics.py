"""Evaluation metrics module.

Trajectory error after Sim(3) alignment (ATE, RPE), scale-only aligned video depth
error, and point-map accuracy / completeness after Umeyama + ICP registration.
Follows Single Responsibility Principle (SRP) - handles only evaluation metrics.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import linregress

from src.config import MetricsConfig
from src.geometry import (
    DegenerateGeometryError,
    NumericalError,
    RigidPose,
    Sim3Transform,
    compose_world_pose,
    rotation_angle,
)
from src.models import DepthAlign
from src.registration import kabsch

logger = logging.getLogger(__name__)


class MetricsError(NumericalError):
    """Raised when a metric is undefined for its inputs."""


class Trajectory:
    """Timestamped camera poses with strictly increasing timestamps."""

    def __init__(self, timestamps: Sequence[float], poses: Sequence[RigidPose]):
        if len(timestamps) != len(poses):
            raise ValueError(f"{len(timestamps)} timestamps for {len(poses)} poses")
        stamps = np.asarray(timestamps, dtype=np.float64)
        if stamps.size > 1 and np.any(np.diff(stamps) <= 0):
            raise ValueError("Trajectory timestamps must be strictly increasing")
        self.timestamps = [float(t) for t in stamps]
        self.poses = list(poses)

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    def centers(self) -> np.ndarray:
        """(N, 3) camera centres."""
        return np.array([p.translation for p in self.poses], dtype=np.float64).reshape(-1, 3)

    def transformed(self, transform: Sim3Transform) -> "Trajectory":
        """Trajectory with every pose mapped by a similarity."""
        return Trajectory(self.timestamps, [compose_world_pose(transform, p) for p in self.poses])

    def matched(self, other: "Trajectory") -> Tuple["Trajectory", "Trajectory"]:
        """Restrict both trajectories to their common timestamps."""
        index = {t: k for k, t in enumerate(other.timestamps)}
        pairs = [(k, index[t]) for k, t in enumerate(self.timestamps) if t in index]
        return (
            Trajectory([self.timestamps[a] for a, _ in pairs], [self.poses[a] for a, _ in pairs]),
            Trajectory([other.timestamps[b] for _, b in pairs], [other.poses[b] for _, b in pairs]),
        )


def umeyama(src, dst, with_scale: bool = True) -> Sim3Transform:
    """
    Least-squares similarity (or rigid) transform with s·R·src + t ≈ dst.

    Args:
        src: (N, 3) source points
        dst: (N, 3) target points
        with_scale: Estimate the scale; otherwise s = 1

    Raises:
        DegenerateGeometryError: Fewer than 3 points or zero source spread
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise DegenerateGeometryError(f"Umeyama needs >= 3 paired points, got {src.shape}")
    mu_src, mu_dst = src.mean(axis=0), dst.mean(axis=0)
    src_c, dst_c = src - mu_src, dst - mu_dst
    var_src = float(np.mean(np.sum(src_c**2, axis=1)))
    if var_src <= 0.0:
        raise DegenerateGeometryError("Umeyama source points are coincident")
    cov = dst_c.T @ src_c / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / var_src) if with_scale else 1.0
    if not scale > 0:
        raise DegenerateGeometryError(f"Umeyama produced non-positive scale {scale}")
    return Sim3Transform(scale, rotation, mu_dst - scale * rotation @ mu_src)


def trajectory_alignment(est: Trajectory, gt: Trajectory) -> Sim3Transform:
    """
    Similarity mapping the estimated camera centres onto ground truth.

    Raises:
        MetricsError: Fewer than 3 matched timestamps
        DegenerateGeometryError: Coincident estimated centres
    """
    est, gt = est.matched(gt)
    if len(est) < 3:
        raise MetricsError(f"Need >= 3 matched poses, got {len(est)}")
    return umeyama(est.centers(), gt.centers(), with_scale=True)


def align_trajectory(est: Trajectory, gt: Trajectory) -> Tuple[Trajectory, Trajectory]:
    """Match timestamps and Sim(3)-align est onto gt via camera centres."""
    transform = trajectory_alignment(est, gt)
    est, gt = est.matched(gt)
    return est.transformed(transform), gt


def ate(est: Trajectory, gt: Trajectory) -> float:
    """RMSE of camera-centre differences after Sim(3) alignment."""
    aligned, gt = align_trajectory(est, gt)
    diff = aligned.centers() - gt.centers()
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))


@dataclass
class RpeResult:
    """Relative pose error: translational RMSE and rotational RMSE in degrees."""

    trans: float
    rot_deg: float


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> RpeResult:
    """
    Relative pose error over index pairs (k, k + delta) after Sim(3) alignment.

    Raises:
        MetricsError: Fewer than delta + 1 matched poses
    """
    est, gt = est.matched(gt)
    if delta < 1 or len(est) < delta + 1:
        raise MetricsError(f"RPE with delta={delta} needs >= {delta + 1} matched poses")
    try:
        est = est.transformed(umeyama(est.centers(), gt.centers(), with_scale=True))
    except DegenerateGeometryError:
        logger.debug("RPE computed without alignment (degenerate camera centres)")
    trans_sq, rot_sq = [], []
    for k in range(len(est) - delta):
        gt_rel = gt.poses[k].inverse().compose(gt.poses[k + delta])
        est_rel = est.poses[k].inverse().compose(est.poses[k + delta])
        error = gt_rel.inverse().compose(est_rel)
        trans_sq.append(float(np.sum(error.translation**2)))
        rot_sq.append(np.degrees(rotation_angle(error.rotation)) ** 2)
    return RpeResult(float(np.sqrt(np.mean(trans_sq))), float(np.sqrt(np.mean(rot_sq))))


@dataclass
class DepthEval:
    """Scale-only aligned depth error statistics."""

    abs_rel: float
    delta_125: float
    sq_rel: float = 0.0
    rmse: float = 0.0
    delta_125_sq: float = 100.0
    delta_125_cube: float = 100.0
    scale: float = 1.0

    def to_dict(self) -> Dict:
        """Convert to dictionary representation."""
        return {
            "abs_rel": self.abs_rel,
            "delta_125": self.delta_125,
            "sq_rel": self.sq_rel,
            "rmse": self.rmse,
            "delta_125_sq": self.delta_125_sq,
            "delta_125_cube": self.delta_125_cube,
            "depth_scale": self.scale,
        }


def _stack(grids) -> np.ndarray:
    if isinstance(grids, np.ndarray):
        return grids.astype(np.float64).reshape(-1)
    return np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1) for g in grids])


def depth_eval(
    est_depths,
    gt_depths,
    valid_masks=None,
    align: DepthAlign = DepthAlign.MEDIAN,
) -> DepthEval:
    """
    Depth error after one global scale-only alignment of est onto gt.

    Args:
        est_depths: Per-frame predicted depth grids (or one stacked array)
        gt_depths: Matching ground-truth grids
        valid_masks: Optional per-frame masks; non-finite or non-positive estimates are
            always excluded
        align: Median ratio or least-squares scale

    Raises:
        MetricsError: Shape mismatch, empty valid set, or zero ground truth on valid pixels
    """
    est = _stack(est_depths)
    gt = _stack(gt_depths)
    if est.shape != gt.shape:
        raise MetricsError(f"Depth size mismatch: {est.shape} vs {gt.shape}")
    valid = np.ones(est.shape, dtype=bool) if valid_masks is None else _stack(valid_masks) > 0
    if valid.shape != est.shape:
        raise MetricsError("Validity mask size does not match depths")
    valid &= np.isfinite(gt) & np.isfinite(est) & (est > 0)
    if np.any(gt[valid] == 0):
        raise MetricsError("Ground-truth depth contains zeros on valid pixels")
    valid &= gt > 0
    if not np.any(valid):
        raise MetricsError("No valid pixels for depth evaluation")
    e, g = est[valid], gt[valid]
    if align == DepthAlign.LSQ:
        scale = float(np.sum(e * g) / np.sum(e * e))
    else:
        scale = float(np.median(g / e))
    aligned = scale * e
    ratio = np.maximum(aligned / g, g / aligned)
    return DepthEval(
        abs_rel=float(np.mean(np.abs(aligned - g) / g)),
        delta_125=float(100.0 * np.mean(ratio < 1.25)),
        sq_rel=float(np.mean((aligned - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((aligned - g) ** 2))),
        delta_125_sq=float(100.0 * np.mean(ratio < 1.25**2)),
        delta_125_cube=float(100.0 * np.mean(ratio < 1.25**3)),
        scale=scale,
    )


def nearest_distances(query, reference, workers: int = 1) -> np.ndarray:
    """Distance from every query point to its nearest reference point (k-d tree)."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if reference.shape[0] == 0:
        raise MetricsError("Empty reference point set")
    distances, _ = cKDTree(reference).query(query, k=1, workers=workers)
    return np.asarray(distances, dtype=np.float64)


@dataclass
class IcpResult:
    """ICP outcome: cumulative pose and the trimmed RMS residual per iteration."""

    pose: RigidPose
    converged: bool
    iterations: int
    residuals: List[float] = field(default_factory=list)


def icp(
    source,
    target,
    max_iters: int = 50,
    tol: float = 1e-6,
    trim: float = 0.95,
    workers: int = 1,
) -> IcpResult:
    """
    Point-to-point ICP with a fixed-fraction trim.

    Each iteration associates every source point with its nearest target point, keeps
    the closest ``trim`` fraction, and solves Kabsch on the kept pairs. Iteration stops
    when the trimmed RMS changes by less than ``tol`` or after ``max_iters`` updates.

    Returns:
        IcpResult whose pose maps source into target; ``converged`` is False when the
        iteration cap was hit
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise MetricsError("ICP needs non-empty point sets")
    tree = cKDTree(target)
    keep = max(1, int(np.ceil(trim * source.shape[0])))
    pose = RigidPose.identity()
    current = source
    residuals: List[float] = []
    converged = False
    iterations = 0
    for iterations in range(max_iters + 1):
        distances, index = tree.query(current, k=1, workers=workers)
        kept = np.argsort(distances, kind="stable")[:keep]
        rms = float(np.sqrt(np.mean(distances[kept] ** 2)))
        residuals.append(rms)
        if len(residuals) > 1 and abs(residuals[-2] - rms) < tol:
            converged = True
            break
        if iterations == max_iters:
            break
        matched = target[index[kept]]
        try:
            step = kabsch(current[kept], matched)
        except DegenerateGeometryError:
            step = RigidPose(np.eye(3), np.mean(matched - current[kept], axis=0))
        pose = step.compose(pose)
        current = pose.apply(source)
    return IcpResult(pose, converged, iterations, residuals)


@dataclass
class PointMapEval:
    """Accuracy / completeness in scene units; chamfer = (acc_mean + comp_mean) / 2."""

    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    chamfer: float

    def to_dict(self) -> Dict:
        """Convert to dictionary representation."""
        return {
            "acc_mean": self.acc_mean,
            "acc_median": self.acc_median,
            "comp_mean": self.comp_mean,
            "comp_median": self.comp_median,
            "chamfer": self.chamfer,
        }


def _finite_rows(points: np.ndarray) -> np.ndarray:
    return np.all(np.isfinite(points), axis=1)


def pointmap_eval(
    est_points,
    gt_points,
    align: bool = True,
    config: Optional[MetricsConfig] = None,
    workers: int = 1,
    paired: bool = False,
    initial: Optional[Sim3Transform] = None,
) -> PointMapEval:
    """
    Accuracy and completeness of an estimated cloud against ground truth.

    With ``align`` the estimate is first registered, then refined by ICP. Index-paired
    clouds (row k of both arrays is the same surface point) are pre-aligned by Umeyama
    with scale; unpaired clouds start from ``initial`` when given, else from identity.

    Args:
        est_points: (N, 3) estimated points; non-finite rows are dropped
        gt_points: (M, 3) ground-truth points
        align: Register before measuring
        config: ICP settings
        workers: k-d tree query threads
        paired: Rows correspond one to one (requires N == M)
        initial: Starting similarity for unpaired clouds, e.g. the trajectory alignment

    Raises:
        MetricsError: Empty clouds, or paired clouds of different length
    """
    config = config or MetricsConfig()
    est = np.asarray(est_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if paired:
        if est.shape != gt.shape:
            raise MetricsError(f"Paired clouds differ in size: {est.shape} vs {gt.shape}")
        keep = _finite_rows(est) & _finite_rows(gt)
        est, gt = est[keep], gt[keep]
    else:
        est, gt = est[_finite_rows(est)], gt[_finite_rows(gt)]
    if est.shape[0] == 0 or gt.shape[0] == 0:
        raise MetricsError("Point map evaluation needs non-empty clouds")
    if align:
        if paired and est.shape[0] >= 3:
            try:
                est = umeyama(est, gt, with_scale=True).apply(est)
            except DegenerateGeometryError as exc:
                logger.debug("Paired pre-alignment skipped: %s", exc)
        elif initial is not None:
            est = initial.apply(est)
        refined = icp(est, gt, config.icp_max_iters, config.icp_tol, config.icp_trim, workers)
        est = refined.pose.apply(est)
    acc = nearest_distances(est, gt, workers)
    comp = nearest_distances(gt, est, workers)
    acc_mean, comp_mean = float(np.mean(acc)), float(np.mean(comp))
    return PointMapEval(
        acc_mean,
        float(np.median(acc)),
        comp_mean,
        float(np.median(comp)),
        (acc_mean + comp_mean) / 2.0,
    )


def stride_index(count: int, max_points: int) -> np.ndarray:
    """Row indices of a deterministic stride subsample of ``count`` rows."""
    if count <= max_points:
        return np.arange(count, dtype=np.int64)
    return np.linspace(0, count - 1, max_points).round().astype(np.int64)


def subsample(points: np.ndarray, max_points: int) -> np.ndarray:
    """Deterministic stride subsample to at most ``max_points`` rows."""
    points = np.asarray(points).reshape(-1, 3)
    return points[stride_index(points.shape[0], max_points)]


@dataclass
class SequenceMetrics:
    """Every metric of one evaluated sequence."""

    ate: Optional[float] = None
    rpe: Optional[RpeResult] = None
    depth: Optional[DepthEval] = None
    points: Optional[PointMapEval] = None
    frames: int = 0

    def to_dict(self) -> Dict:
        """Flat dictionary of available metrics."""
        result: Dict = {"frames": self.frames}
        if self.ate is not None:
            result["ate"] = self.ate
        if self.rpe is not None:
            result["rpe_trans"] = self.rpe.trans
            result["rpe_rot_deg"] = self.rpe.rot_deg
        if self.depth is not None:
            result.update(self.depth.to_dict())
        if self.points is not None:
            result.update(self.points.to_dict())
        return result


def _initial_point_alignment(
    est_traj: Trajectory, gt_traj: Trajectory
) -> Optional[Sim3Transform]:
    try:
        return trajectory_alignment(est_traj, gt_traj)
    except (MetricsError, DegenerateGeometryError) as exc:
        logger.debug("Point clouds start from identity: %s", exc)
        return None


def evaluate_sequence(
    est_traj: Trajectory,
    gt_traj: Trajectory,
    est_depths=None,
    gt_depths=None,
    est_points=None,
    gt_points=None,
    config: Optional[MetricsConfig] = None,
    workers: int = 1,
    paired_points: bool = False,
) -> SequenceMetrics:
    """
    Evaluate whatever inputs are provided.

    Point clouds are unpaired unless ``paired_points`` is set: each cloud is then
    subsampled on its own and ICP starts from the trajectory alignment. Paired clouds
    share one finite-row mask and one subsample index, so their rows stay matched.
    """
    config = config or MetricsConfig()
    metrics = SequenceMetrics(frames=len(est_traj))
    metrics.ate = ate(est_traj, gt_traj)
    metrics.rpe = rpe(est_traj, gt_traj, config.rpe_delta)
    if est_depths is not None and gt_depths is not None:
        metrics.depth = depth_eval(est_depths, gt_depths, align=config.depth_align)
    if est_points is None or gt_points is None:
        return metrics
    est = np.asarray(est_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if paired_points:
        if est.shape != gt.shape:
            raise MetricsError(f"Paired clouds differ in size: {est.shape} vs {gt.shape}")
        keep = _finite_rows(est) & _finite_rows(gt)
        est, gt = est[keep], gt[keep]
        index = stride_index(est.shape[0], config.eval_max_points)
        metrics.points = pointmap_eval(
            est[index], gt[index], config=config, workers=workers, paired=True
        )
    else:
        metrics.points = pointmap_eval(
            subsample(est[_finite_rows(est)], config.eval_max_points),
            subsample(gt[_finite_rows(gt)], config.eval_max_points),
            config=config,
            workers=workers,
            initial=_initial_point_alignment(est_traj, gt_traj),
        )
    return metrics


@dataclass
class TimeTrend:
    """Least-squares trend of a per-window series against window index."""

    slope: float
    intercept: float
    p_value: float

    @property
    def flat(self) -> bool:
        """True when a zero slope is not rejected at the 5% level."""
        return self.p_value > 0.05


def time_trend(samples: Sequence[float]) -> TimeTrend:
    """
    Regress per-window samples (e.g. milliseconds) on their index.

    Series shorter than three points or without spread report a zero slope with
    p = 1.
    """
    values = np.asarray(samples, dtype=np.float64).reshape(-1)
    if values.size < 3 or np.ptp(values) == 0.0:
        return TimeTrend(0.0, float(values.mean()) if values.size else 0.0, 1.0)
    fit = linregress(np.arange(values.size, dtype=np.float64), values)
    return TimeTrend(float(fit.slope), float(fit.intercept), float(fit.pvalue))
