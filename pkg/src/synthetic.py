"""Synthetic ground-truth scene generator.

Stands in for the frozen reconstruction backbone: a layered scene (background plane
plus foreground cards) is ray-cast from a parametric camera path, then each window's
prediction is produced by re-expressing ground truth in the window's local frame and
corrupting it with a recorded similarity distortion, per-layer depth scales and noise.

Follows Single Responsibility Principle (SRP) - handles only synthetic data generation.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from src.config import SceneConfig, SceneConfigError
from src.geometry import (
    ConfidenceMap,
    PointMap,
    RigidPose,
    Sim3Transform,
    rot_y,
    rotation_about_axis,
)
from src.metrics import Trajectory
from src.models import CameraPath, FramePrediction, WindowPrediction, WindowSpec

logger = logging.getLogger(__name__)

__all__ = [
    "SceneConfig",
    "SceneConfigError",
    "ScenePlane",
    "WindowDistortion",
    "SyntheticScene",
    "generate_scene",
    "emit_window",
    "ground_truth_arrays",
]

BACKGROUND_DEPTH = 10.0
NEAREST_CARD_DEPTH = 3.0
FARTHEST_CARD_DEPTH = 5.5
PIVOT_DISTANCE = 5.0
LINE_HALF_LENGTH = 0.25
ARC_HALF_ANGLE_DEG = 6.0
ORBIT_RADIUS = 0.3
SLANT_DEG = 20.0
LAYER_DEAD_ZONE = 0.05
RADIAL_FALLOFF = 0.1

_DISTORTION_STREAM = 1
_NOISE_STREAM = 2
_LAYOUT_STREAM = 3


def look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``center`` looking at ``target`` (+Y up)."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    z_axis = -forward / np.linalg.norm(forward)
    x_axis = np.cross([0.0, 1.0, 0.0], z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis], axis=1)


def camera_rays(height: int, width: int) -> np.ndarray:
    """Per-pixel camera-frame ray directions with unit depth (z = -1)."""
    focal = 0.9 * width
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(cols - cx) / focal, -(rows - cy) / focal, -np.ones_like(rows)], axis=-1)


def radial_weight(height: int, width: int) -> np.ndarray:
    """Confidence falloff 1 - 0.1·(ρ/ρ_max)² with ρ the distance to the image centre."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    rho2 = (cols - cx) ** 2 + (rows - cy) ** 2
    return 1.0 - RADIAL_FALLOFF * rho2 / max(rho2.max(), 1e-12)


@dataclass(frozen=True)
class ScenePlane:
    """Planar patch: origin, in-plane unit axes and half extents (inf for unbounded)."""

    label: int
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float = np.inf
    half_v: float = np.inf

    @property
    def normal(self) -> np.ndarray:
        """Unit plane normal."""
        return np.cross(self.axis_u, self.axis_v)

    def transformed(self, pose: RigidPose) -> "ScenePlane":
        """Plane moved by a rigid transform."""
        return ScenePlane(
            self.label,
            pose.apply(self.origin),
            pose.rotation @ self.axis_u,
            pose.rotation @ self.axis_v,
            self.half_u,
            self.half_v,
        )

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit per ray (inf where the ray misses the patch)."""
        normal = self.normal
        denom = dirs @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(np.abs(denom) > 1e-12, ((self.origin - origin) @ normal) / denom, np.inf)
        hits = origin + lam[..., None] * dirs
        rel = hits - self.origin
        inside = (
            (lam > 0)
            & (np.abs(rel @ self.axis_u) <= self.half_u)
            & (np.abs(rel @ self.axis_v) <= self.half_v)
        )
        return np.where(inside, lam, np.inf)


@dataclass(frozen=True)
class WindowDistortion:
    """Replayable corruption record of one window."""

    index: int
    transform: Sim3Transform
    layer_scales: Tuple[float, ...]
    noise_sigma: float

    @classmethod
    def identity(cls, index: int, layers: int, noise_sigma: float = 0.0) -> "WindowDistortion":
        """Distortion that leaves the local-frame ground truth unchanged (except noise)."""
        return cls(index, Sim3Transform.identity(), (1.0,) * layers, noise_sigma)


@dataclass(frozen=True)
class FrameGroundTruth:
    """Ray-cast ground truth of one frame."""

    timestamp: int
    points: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    pose: RigidPose


class SyntheticScene:
    """Layered synthetic scene with a smooth camera path.

    The world frame coincides with the first camera; frames are ray-cast on demand so
    long streams keep a constant footprint.
    """

    def __init__(self, config: SceneConfig, seed: int, poses: List[RigidPose], planes):
        self.config = config
        self.seed = seed
        self.poses = tuple(poses)
        self.planes = tuple(planes)
        self._rays = camera_rays(config.height, config.width)
        self.radial = radial_weight(config.height, config.width)
        self.diameter = self._compute_diameter()

    @property
    def frame_count(self) -> int:
        """Number of frames."""
        return len(self.poses)

    @property
    def trajectory(self) -> Trajectory:
        """Ground-truth world trajectory."""
        return Trajectory(list(range(1, self.frame_count + 1)), list(self.poses))

    def pose(self, timestamp: int) -> RigidPose:
        """World pose of a frame (1-based)."""
        return self.poses[timestamp - 1]

    def frame(self, timestamp: int) -> FrameGroundTruth:
        """Ray-cast the ground truth of one frame."""
        pose = self.pose(timestamp)
        dirs = self._rays @ pose.rotation.T
        best = np.full(dirs.shape[:2], np.inf)
        labels = np.full(dirs.shape[:2], -1, dtype=np.int32)
        for plane in self.planes:
            lam = plane.intersect(pose.translation, dirs)
            closer = lam < best
            best = np.where(closer, lam, best)
            labels = np.where(closer, plane.label, labels)
        if not np.all(np.isfinite(best)):
            raise SceneConfigError(f"Frame {timestamp} has pixels that hit no surface")
        points = pose.translation + best[..., None] * dirs
        return FrameGroundTruth(timestamp, points, labels, best, pose)

    def distortion(self, index: int) -> WindowDistortion:
        """Recorded distortion of a window; window 1 defines the world gauge."""
        cfg = self.config
        if index == 1:
            return WindowDistortion.identity(1, cfg.layers, cfg.noise_sigma)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _DISTORTION_STREAM, index]))
        low, high = cfg.window_scale_range
        scale = float(np.exp(rng.uniform(np.log(low), np.log(high))))
        axis = rng.normal(size=3)
        angle = np.radians(rng.uniform(*cfg.window_rot_deg_range))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        magnitude = rng.uniform(*cfg.window_trans_range) * self.diameter
        layer_scales = [1.0] + [_draw_layer_scale(rng, cfg.layer_scale_range)
                                for _ in range(cfg.layers - 1)]
        return WindowDistortion(
            index,
            Sim3Transform(scale, rotation_about_axis(axis, angle), magnitude * direction),
            tuple(layer_scales),
            cfg.noise_sigma,
        )

    def local_transform(self, window: WindowSpec, distortion: WindowDistortion) -> Sim3Transform:
        """World-to-local map of a window: distortion ∘ inverse(first camera pose)."""
        first = self.pose(window.start).inverse()
        return distortion.transform.compose(Sim3Transform.from_rigid(first))

    def true_registration(self, window: WindowSpec) -> Sim3Transform:
        """Exact local-to-world similarity of a window's prediction."""
        return self.local_transform(window, self.distortion(window.index)).inverse()

    def _compute_diameter(self) -> float:
        low = np.full(3, np.inf)
        high = np.full(3, -np.inf)
        for timestamp in range(1, self.frame_count + 1):
            pts = self.frame(timestamp).points.reshape(-1, 3)
            low = np.minimum(low, pts.min(axis=0))
            high = np.maximum(high, pts.max(axis=0))
        return float(np.linalg.norm(high - low))


def _draw_layer_scale(rng: np.random.Generator, scale_range: Tuple[float, float]) -> float:
    low, high = scale_range
    if low >= 1.0 - LAYER_DEAD_ZONE and high <= 1.0 + LAYER_DEAD_ZONE:
        return float(rng.uniform(low, high))
    # foreground layers always carry a visible mis-scale
    while True:
        value = float(rng.uniform(low, high))
        if abs(value - 1.0) >= LAYER_DEAD_ZONE:
            return value


def _camera_path(config: SceneConfig) -> List[RigidPose]:
    poses = []
    pivot = np.array([0.0, 0.0, -PIVOT_DISTANCE])
    for k in range(config.frames):
        u = k / (config.frames - 1) if config.frames > 1 else 0.0
        if config.camera_path == CameraPath.LINE:
            center = np.array([-LINE_HALF_LENGTH + 2.0 * LINE_HALF_LENGTH * u, 0.0, 0.0])
            target = center + np.array([0.0, 0.0, -PIVOT_DISTANCE])
        elif config.camera_path == CameraPath.ARC:
            theta = np.radians(-ARC_HALF_ANGLE_DEG + 2.0 * ARC_HALF_ANGLE_DEG * u)
            center = pivot + PIVOT_DISTANCE * np.array([np.sin(theta), 0.0, np.cos(theta)])
            target = pivot
        else:
            phi = 2.0 * np.pi * u
            center = np.array([ORBIT_RADIUS * np.cos(phi), ORBIT_RADIUS * np.sin(phi), 0.0])
            target = pivot
        poses.append(RigidPose(look_at(center, target), center))
    return poses


def _layout_planes(config: SceneConfig, reference: RigidPose, rng: np.random.Generator):
    """Background plane plus foreground cards placed side by side in the reference view."""
    planes = [
        ScenePlane(
            0,
            np.array([0.0, 0.0, -BACKGROUND_DEPTH]),
            np.array([1.0, 0.0, 0.0]),
            np.array([0.0, 1.0, 0.0]),
        )
    ]
    cards = config.layers - 1
    focal = 0.9 * config.width
    cx = (config.width - 1) / 2.0
    slot = config.width / (cards + 1) if cards else 0.0
    for j in range(cards):
        spread = j / (cards - 1) if cards > 1 else 0.0
        depth = NEAREST_CARD_DEPTH + (FARTHEST_CARD_DEPTH - NEAREST_CARD_DEPTH) * spread
        depth += rng.uniform(-0.1, 0.1)
        column = (j + 1) * (config.width - 1) / (cards + 1) + rng.uniform(-0.05, 0.05) * slot
        half_u = depth * 0.35 * slot / focal
        half_v = depth * 0.25 * config.height / focal
        axis_u = np.array([1.0, 0.0, 0.0])
        axis_v = np.array([0.0, 1.0, 0.0])
        if j < config.slanted_planes:
            axis_u = rot_y(np.radians(SLANT_DEG)) @ axis_u
        origin = np.array([depth * (column - cx) / focal, 0.0, -depth])
        card = ScenePlane(j + 1, origin, axis_u, axis_v, half_u, half_v)
        planes.append(card.transformed(reference))
    return planes


def generate_scene(config: SceneConfig, seed: Optional[int] = None) -> SyntheticScene:
    """
    Generate a deterministic layered scene.

    Args:
        config: Scene settings
        seed: Random seed; defaults to ``config.seed``

    Returns:
        SyntheticScene whose world frame is the first camera's frame

    Raises:
        SceneConfigError: For degenerate settings
    """
    seed = config.seed if seed is None else int(seed)
    if config.frames < 1 or config.layers < 1:
        raise SceneConfigError("Scene needs at least one frame and one layer")
    raw_poses = _camera_path(config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _LAYOUT_STREAM]))
    reference = raw_poses[(len(raw_poses) - 1) // 2]
    raw_planes = _layout_planes(config, reference, rng)
    to_world = raw_poses[0].inverse()
    poses = [to_world.compose(pose) for pose in raw_poses]
    planes = [plane.transformed(to_world) for plane in raw_planes]
    scene = SyntheticScene(config, seed, poses, planes)
    logger.debug(
        "Generated %s scene: %d frames, %d layers, diameter %.3f",
        config.camera_path.value,
        config.frames,
        config.layers,
        scene.diameter,
    )
    return scene


def emit_window(
    scene: SyntheticScene, window: WindowSpec, distortion: Optional[WindowDistortion] = None
) -> WindowPrediction:
    """
    Produce the corrupted local-frame prediction of one window.

    Ground truth is mapped into the window frame (first camera of the window), distorted
    by the recorded similarity, each pixel is moved along its camera ray by its layer's
    scale, and isotropic noise (``noise_sigma`` world units) is added. Confidence is
    ``radial / (1 + ‖n‖)`` with n the world-unit noise of the pixel; layer scales do not
    lower it.

    Args:
        scene: Scene to sample
        window: Window inside the scene extent
        distortion: Override of the recorded distortion (replay experiments)
    """
    if window.start < 1 or window.end > scene.frame_count:
        raise ValueError(f"Window {window.index} exceeds the {scene.frame_count}-frame scene")
    distortion = distortion or scene.distortion(window.index)
    if len(distortion.layer_scales) < scene.config.layers:
        raise ValueError("Distortion record has fewer layer scales than scene layers")
    to_local = scene.local_transform(window, distortion)
    layer_scales = np.asarray(distortion.layer_scales, dtype=np.float64)
    rng = np.random.default_rng(
        np.random.SeedSequence([scene.seed, _NOISE_STREAM, window.index])
    )
    invalid_fraction = scene.config.invalid_fraction
    frames = []
    for timestamp in window.frames:
        truth = scene.frame(timestamp)
        pixel_scale = layer_scales[truth.labels][..., None]
        local_center = to_local.apply(truth.pose.translation)
        local = to_local.apply(truth.points)
        local = local_center + pixel_scale * (local - local_center)
        noise = np.zeros_like(local)
        if distortion.noise_sigma > 0:
            noise = rng.normal(0.0, distortion.noise_sigma, size=local.shape)
            local = local + to_local.scale * noise
        conf = scene.radial / (1.0 + np.linalg.norm(noise, axis=-1))
        valid = np.ones(truth.labels.shape, dtype=bool)
        if invalid_fraction > 0:
            valid = rng.random(truth.labels.shape) >= invalid_fraction
            local = np.where(valid[..., None], local, np.nan)
            conf = np.where(valid, conf, 0.0)
        local_pose = RigidPose(to_local.rotation @ truth.pose.rotation, local_center)
        frames.append(
            FramePrediction(timestamp, PointMap(local, valid), local_pose, ConfidenceMap(conf))
        )
    return WindowPrediction(window, tuple(frames))


def ground_truth_arrays(
    scene: SyntheticScene, timestamps: Optional[List[int]] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Stack ground truth for evaluation and export.

    Returns:
        (timestamps, depth grids (N, H, W) float32, world points (M, 3) float32)
    """
    stamps = list(timestamps) if timestamps is not None else list(range(1, scene.frame_count + 1))
    depths, points = [], []
    for timestamp in stamps:
        truth = scene.frame(int(timestamp))
        depths.append(truth.depth.astype(np.float32))
        points.append(truth.points.reshape(-1, 3).astype(np.float32))
    return np.asarray(stamps, dtype=np.int64), np.stack(depths), np.concatenate(points)
