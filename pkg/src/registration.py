"""Two-stage Sim(3) submap registration.

Stage one estimates the window scale with a Huber-robust IRLS over mutually confident
point correspondences; stage two recovers rotation and translation with Kabsch on
scaled camera anchors of the overlap frames.

Follows Single Responsibility Principle (SRP) - handles only submap registration.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from src.config import RegistrationConfig
from src.geometry import (
    DegenerateGeometryError,
    NumericalError,
    RigidPose,
    Sim3Transform,
    compose_world_pose,
    sim3_pointmap,
)
from src.models import (
    CoordinateFrame,
    FramePrediction,
    RigidSource,
    ScaleEstimator,
    WindowPrediction,
)

logger = logging.getLogger(__name__)

MIN_SCALE = 1e-12
VIEW_AXIS = np.array([0.0, 0.0, -1.0])
UP_AXIS = np.array([0.0, 1.0, 0.0])


class EmptyCorrespondenceError(NumericalError):
    """Raised when an estimator receives no correspondences."""


class EstimationError(NumericalError):
    """Raised when a scale cannot be estimated (all-zero source, non-finite input)."""


@dataclass(frozen=True)
class IrlsConfig:
    """Huber IRLS settings.

    ``huber_delta=None`` means delta_factor × median target norm, fixed for the solve.
    With ``rescale`` the threshold is instead delta_factor × the ‖p‖²-weighted median
    residual, recomputed before every reweighting from the current residuals.
    """

    huber_delta: Optional[float] = None
    delta_factor: float = 0.1
    max_iters: int = 50
    rel_tol: float = 1e-6
    rescale: bool = False

    def __post_init__(self):
        if self.huber_delta is not None and not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.rel_tol > 0:
            raise ValueError(f"rel_tol must be positive, got {self.rel_tol}")

    @classmethod
    def from_registration_config(cls, config: RegistrationConfig) -> "IrlsConfig":
        """IRLS settings of a registration config section."""
        return cls(
            None,
            config.huber_delta_factor,
            config.irls_max_iters,
            config.irls_rel_tol,
            config.huber_rescale,
        )


@dataclass
class IrlsResult:
    """Outcome of an IRLS scale solve."""

    scale: float
    iterations: int
    delta: float
    converged: bool
    objective_history: List[float] = field(default_factory=list)


def huber(residuals: np.ndarray, delta: float) -> np.ndarray:
    """Huber loss per residual."""
    r = np.abs(residuals)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def _as_rows(values) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    return array.reshape(-1, 1) if array.ndim == 1 else array


def huber_objective(scale: float, source, target, delta: float) -> float:
    """Σ ρ(‖s·p − q‖) for paired rows (vectors or scalars)."""
    src, dst = _as_rows(source), _as_rows(target)
    return float(np.sum(huber(np.linalg.norm(scale * src - dst, axis=1), delta)))


def irls_scale(source, target, config: Optional[IrlsConfig] = None) -> IrlsResult:
    """
    Robust scale s with s·p ≈ q by iteratively reweighted least squares.

    Starts from s₀ = Σ‖p‖‖q‖ / Σ‖p‖², then alternates Huber weights
    w = min(1, δ/r) and the weighted closed form s = Σw⟨p,q⟩ / Σw⟨p,p⟩.
    The objective history is non-increasing for a fixed δ; with ``rescale`` each entry
    is measured with the δ of its own iteration.

    Args:
        source: (N,) or (N, D) values p
        target: Matching values q
        config: IRLS settings

    Returns:
        IrlsResult with the per-iteration objective history

    Raises:
        EmptyCorrespondenceError: No pairs
        EstimationError: Non-finite input or all-zero source
    """
    config = config or IrlsConfig()
    src, dst = _as_rows(source), _as_rows(target)
    if src.shape != dst.shape:
        raise EstimationError(f"Source {src.shape} and target {dst.shape} differ in shape")
    if src.shape[0] == 0:
        raise EmptyCorrespondenceError("No correspondences for scale estimation")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise EstimationError("Non-finite correspondences")

    src_norm = np.linalg.norm(src, axis=1)
    dst_norm = np.linalg.norm(dst, axis=1)
    denom = float(np.sum(src_norm**2))
    if denom <= 0.0:
        raise EstimationError("All source values are zero; scale is undefined")

    delta = config.huber_delta
    if delta is None:
        delta = config.delta_factor * float(np.median(dst_norm))
        if delta <= 0.0:
            delta = config.delta_factor * float(np.mean(dst_norm)) or np.finfo(float).eps

    scale = max(float(np.sum(src_norm * dst_norm)) / denom, MIN_SCALE)
    dots = np.sum(src * dst, axis=1)
    sq = src_norm**2
    if config.rescale:
        initial = np.linalg.norm(scale * src - dst, axis=1)
        delta = _residual_delta(initial, sq, config.delta_factor)
    history = [huber_objective(scale, src, dst, delta)]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        residuals = np.linalg.norm(scale * src - dst, axis=1)
        if config.rescale:
            delta = _residual_delta(residuals, sq, config.delta_factor)
        weights = np.where(residuals <= delta, 1.0, delta / np.maximum(residuals, 1e-300))
        weighted_sq = float(np.sum(weights * sq))
        if weighted_sq <= 0.0:
            break
        updated = max(float(np.sum(weights * dots)) / weighted_sq, MIN_SCALE)
        change = abs(updated - scale) / scale
        scale = updated
        history.append(huber_objective(scale, src, dst, delta))
        if change < config.rel_tol:
            converged = True
            break
    return IrlsResult(scale, iterations, delta, converged, history)


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Smallest value whose cumulative weight reaches half the total."""
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order])
    k = int(np.searchsorted(cumulative, 0.5 * cumulative[-1]))
    return float(values[order][min(k, values.size - 1)])


def _residual_delta(residuals: np.ndarray, sq: np.ndarray, factor: float) -> float:
    # Same weights as the normal equation Σw‖p‖².
    return factor * weighted_median(residuals, sq)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired points at identical pixels and timestamps.

    ``p`` comes from the previous (world-aligned) window, ``q`` from the current
    window's local prediction; ``frames`` and ``pixels`` record where each pair lives.
    """

    p: np.ndarray
    q: np.ndarray
    frames: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return int(self.p.shape[0])

    @classmethod
    def from_pairs(cls, p, q) -> "CorrespondenceSet":
        """Build a set from bare point pairs (no pixel bookkeeping)."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        n = p.shape[0]
        return cls(p, q, np.zeros(n, dtype=np.int64), np.zeros((n, 2), dtype=np.int64))

    def reversed(self) -> "CorrespondenceSet":
        """Swap the roles of p and q."""
        return CorrespondenceSet(self.q, self.p, self.frames, self.pixels)


def select_correspondences(
    prev: WindowPrediction,
    curr: WindowPrediction,
    overlap_frames: Sequence[int],
    percentile: float = 50.0,
) -> CorrespondenceSet:
    """
    Pixels valid in both windows whose confidences strictly exceed each window's gate.

    The gate of a window is the given percentile (50 = median) of its confidences over
    the valid pixels of the overlap frames.

    Raises:
        ValueError: Empty overlap or mismatched image sizes
    """
    if not overlap_frames:
        raise ValueError("Overlap frame list is empty")
    if (prev.height, prev.width) != (curr.height, curr.width):
        raise ValueError(
            f"Image size mismatch: {prev.height}x{prev.width} vs {curr.height}x{curr.width}"
        )
    prev_frames = [prev.frame(t) for t in overlap_frames]
    curr_frames = [curr.frame(t) for t in overlap_frames]
    prev_gate = _confidence_gate(prev_frames, percentile)
    curr_gate = _confidence_gate(curr_frames, percentile)

    ps, qs, frames, pixels = [], [], [], []
    for t, a, b in zip(overlap_frames, prev_frames, curr_frames):
        mask = (
            a.pointmap.valid
            & b.pointmap.valid
            & (a.confidence.values > prev_gate)
            & (b.confidence.values > curr_gate)
        )
        rows, cols = np.nonzero(mask)
        ps.append(a.pointmap.points[rows, cols].astype(np.float64))
        qs.append(b.pointmap.points[rows, cols].astype(np.float64))
        frames.append(np.full(rows.shape, t, dtype=np.int64))
        pixels.append(np.stack([rows, cols], axis=1))
    return CorrespondenceSet(
        np.concatenate(ps).reshape(-1, 3),
        np.concatenate(qs).reshape(-1, 3),
        np.concatenate(frames),
        np.concatenate(pixels).reshape(-1, 2),
    )


def _confidence_gate(frames: List[FramePrediction], percentile: float) -> float:
    values = np.concatenate([f.confidence.values[f.pointmap.valid] for f in frames])
    if values.size == 0:
        return np.inf
    return float(np.percentile(values.astype(np.float64), percentile))


def estimate_scale_irls(corr: CorrespondenceSet, cfg: Optional[IrlsConfig] = None) -> float:
    """Huber IRLS scale s with s·p ≈ q over a correspondence set."""
    return irls_scale(corr.p, corr.q, cfg).scale


def estimate_scale_closed_form(corr: CorrespondenceSet) -> float:
    """Non-robust least-squares scale Σ⟨p,q⟩ / Σ‖p‖²."""
    if len(corr) == 0:
        raise EmptyCorrespondenceError("No correspondences for scale estimation")
    denom = float(np.sum(corr.p * corr.p))
    if denom <= 0.0:
        raise EstimationError("All source values are zero; scale is undefined")
    return max(float(np.sum(corr.p * corr.q)) / denom, MIN_SCALE)


@dataclass(frozen=True)
class AnchorTriplet:
    """Scaled camera centre plus unit view and up offsets."""

    center: np.ndarray
    view: np.ndarray
    up: np.ndarray

    def as_array(self) -> np.ndarray:
        """(3, 3) array: centre, view point, up point."""
        return np.stack([self.center, self.view, self.up])


def build_camera_anchors(poses: Sequence[RigidPose], scale: float = 1.0) -> List[AnchorTriplet]:
    """Anchor triplets (s·t, s·t + R·v, s·t + R·u) with v = (0,0,−1), u = (0,1,0)."""
    anchors = []
    for pose in poses:
        center = scale * pose.translation
        anchors.append(
            AnchorTriplet(center, center + pose.rotation @ VIEW_AXIS, center + pose.rotation @ UP_AXIS)
        )
    return anchors


def stack_anchors(anchors: Sequence[AnchorTriplet]) -> np.ndarray:
    """(3N, 3) array of all anchor points."""
    return np.concatenate([a.as_array() for a in anchors]).reshape(-1, 3)


def kabsch(x, y, rank_tol: float = 1e-10) -> RigidPose:
    """
    Least-squares rigid transform with R·x + t ≈ y.

    Args:
        x: (N, 3) source points
        y: (N, 3) target points, N >= 3
        rank_tol: Relative singular value below which the source is treated as degenerate

    Returns:
        RigidPose (R, t) with det(R) = +1

    Raises:
        DegenerateGeometryError: Fewer than 3 pairs, or collinear/coincident source points
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape or x.shape[0] < 3:
        raise DegenerateGeometryError(f"Kabsch needs >= 3 paired points, got {x.shape}, {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateGeometryError("Kabsch input is not finite")
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    spread = np.linalg.svd(xc, compute_uv=False)
    if spread[0] <= 0.0 or spread[1] <= rank_tol * spread[0]:
        raise DegenerateGeometryError("Kabsch source points are collinear or coincident")
    u, _, vt = np.linalg.svd(xc.T @ yc)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidPose(rotation, y_mean - rotation @ x_mean)


@dataclass
class RegistrationResult:
    """Registration of one window with bookkeeping for diagnostics."""

    transform: Sim3Transform
    correspondences: int = 0
    fallback: Optional[str] = None
    irls: Optional[IrlsResult] = None


def to_camera_frame(points: np.ndarray, frames: np.ndarray, prediction: WindowPrediction):
    """Express each point in the camera frame of its own timestamp."""
    out = np.empty_like(points, dtype=np.float64)
    for t in np.unique(frames):
        pose = prediction.frame(int(t)).pose
        rows = frames == t
        out[rows] = (points[rows] - pose.translation) @ pose.rotation
    return out


class SubmapRegistrar:
    """Registers window predictions into the world frame one window at a time.

    Follows Strategy Pattern - scale estimator and rigid point source are configurable.
    """

    def __init__(
        self, config: Optional[RegistrationConfig] = None, irls: Optional[IrlsConfig] = None
    ):
        self.config = config or RegistrationConfig()
        self.irls = irls or IrlsConfig.from_registration_config(self.config)

    def register(
        self,
        prev_world: Optional[WindowPrediction],
        curr: WindowPrediction,
        overlap: Sequence[int],
        previous: Optional[Sim3Transform] = None,
    ) -> RegistrationResult:
        """
        Estimate the local-to-world similarity of ``curr``.

        Args:
            prev_world: Previous window in world coordinates (None for the first window)
            curr: Current window in its local frame
            overlap: Shared timestamps
            previous: Registration of the previous window (fallback scale)

        Returns:
            RegistrationResult; estimator failures yield a pose-based fallback
        """
        if prev_world is None:
            return RegistrationResult(Sim3Transform.identity())

        corr = select_correspondences(prev_world, curr, overlap, self.config.conf_percentile)
        if len(corr) == 0:
            return self._fallback(prev_world, curr, overlap, previous, None, "empty correspondences")

        p_cam = to_camera_frame(corr.p, corr.frames, prev_world)
        q_cam = to_camera_frame(corr.q, corr.frames, curr)
        camera_pairs = CorrespondenceSet(p_cam, q_cam, corr.frames, corr.pixels).reversed()
        irls_result = None
        try:
            if self.config.scale_estimator == ScaleEstimator.CLOSED_FORM:
                scale = estimate_scale_closed_form(camera_pairs)
            else:
                irls_result = irls_scale(camera_pairs.p, camera_pairs.q, self.irls)
                scale = irls_result.scale
        except NumericalError as exc:
            return self._fallback(prev_world, curr, overlap, previous, None, f"scale: {exc}")

        try:
            if self.config.rigid_source == RigidSource.POINTS:
                rigid = kabsch(scale * corr.q, corr.p)
            else:
                source = build_camera_anchors([curr.frame(t).pose for t in overlap], scale)
                target = build_camera_anchors([prev_world.frame(t).pose for t in overlap], 1.0)
                rigid = kabsch(stack_anchors(source), stack_anchors(target))
        except DegenerateGeometryError as exc:
            return self._fallback(prev_world, curr, overlap, previous, scale, f"kabsch: {exc}")

        return RegistrationResult(
            Sim3Transform(scale, rigid.rotation, rigid.translation), len(corr), None, irls_result
        )

    @staticmethod
    def _fallback(
        prev_world: WindowPrediction,
        curr: WindowPrediction,
        overlap: Sequence[int],
        previous: Optional[Sim3Transform],
        scale: Optional[float],
        reason: str,
    ) -> RegistrationResult:
        """Align curr's first overlap camera with its world pose in the previous window."""
        if scale is None:
            scale = previous.scale if previous is not None else 1.0
        t0 = overlap[0]
        world = prev_world.frame(t0).pose
        local = curr.frame(t0).pose
        rotation = world.rotation @ local.rotation.T
        translation = world.translation - scale * (rotation @ local.translation)
        logger.warning(
            "Window %d registration fell back to pose carry-forward (%s)",
            curr.window.index,
            reason,
        )
        return RegistrationResult(Sim3Transform(scale, rotation, translation), 0, reason)


def register_submap(
    prev_world: Optional[WindowPrediction],
    curr: WindowPrediction,
    overlap: Sequence[int],
    cfg: Optional[IrlsConfig] = None,
    previous: Optional[Sim3Transform] = None,
) -> Sim3Transform:
    """Legacy wrapper for SubmapRegistrar.register() returning only the transform."""
    return SubmapRegistrar(irls=cfg).register(prev_world, curr, overlap, previous).transform


def to_world(pred: WindowPrediction, reg: Sim3Transform) -> WindowPrediction:
    """Apply a registration to every point map and pose of a local prediction."""
    frames = [
        FramePrediction(
            f.timestamp,
            sim3_pointmap(reg, f.pointmap),
            compose_world_pose(reg, f.pose),
            f.confidence,
        )
        for f in pred.frames
    ]
    return pred.replace_frames(frames, CoordinateFrame.WORLD)
