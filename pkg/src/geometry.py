"""Geometry primitives shared by every stage of the alignment engine.

This module defines the rotation / rigid / similarity transform value types and the
point-map containers predicted per frame, plus the elementary transforms applied to
them. All world-frame arithmetic is done in float64; point maps are stored in float32.

Follows Single Responsibility Principle (SRP) - handles only geometric primitives.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

ORTHONORMAL_TOL = 1e-9
# Pose and transform constructors accept float32 round trips of a rotation.
ROTATION_INPUT_TOL = 1e-6


class NumericalError(Exception):
    """Base exception for numerical failures (degenerate input, non-finite values)."""


class DegenerateGeometryError(NumericalError):
    """Raised when a point configuration cannot determine a transform."""


def _frozen_array(values, dtype=np.float64, shape=None) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    if shape is not None and array.shape != shape:
        raise ValueError(f"Expected array of shape {shape}, got {array.shape}")
    array.flags.writeable = False
    return array


def _checked_rotation(values) -> np.ndarray:
    rotation = _frozen_array(values, shape=(3, 3))
    if not is_rotation(rotation, ROTATION_INPUT_TOL):
        raise ValueError(f"Rotation fails orthonormality or det = +1 within {ROTATION_INPUT_TOL}")
    return rotation


def is_rotation(matrix: np.ndarray, tol: float = ORTHONORMAL_TOL) -> bool:
    """True for an orthonormal matrix with determinant +1."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        return False
    if np.max(np.abs(matrix @ matrix.T - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(matrix) - 1.0) <= tol


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    x, y, z = axis / norm
    skew = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * skew + (1.0 - np.cos(angle_rad)) * (skew @ skew)


def rot_x(angle_rad: float) -> np.ndarray:
    """Rotation about the X axis."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle_rad: float) -> np.ndarray:
    """Rotation about the Y axis."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle_rad: float) -> np.ndarray:
    """Rotation about the Z axis."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_angle(matrix: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    cos_angle = (np.trace(np.asarray(matrix, dtype=np.float64)) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def project_to_rotation(matrix: np.ndarray) -> np.ndarray:
    """Nearest rotation (Frobenius) to a 3x3 matrix, with reflection correction."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform (R | t); for cameras it maps camera coordinates to the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _checked_rotation(self.rotation))
        object.__setattr__(self, "translation", _frozen_array(self.translation, shape=(3,)))

    @classmethod
    def identity(cls) -> "RigidPose":
        """Identity pose."""
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the parent frame."""
        return self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) points: R·p + t."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return self ∘ other."""
        return RigidPose(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> "RigidPose":
        """Inverse transform."""
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform p -> s·R·p + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0.0:
            raise ValueError(f"Sim3 scale must be positive and finite, got {scale}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", _checked_rotation(self.rotation))
        object.__setattr__(self, "translation", _frozen_array(self.translation, shape=(3,)))

    @classmethod
    def identity(cls) -> "Sim3Transform":
        """Identity similarity."""
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_rigid(cls, pose: RigidPose, scale: float = 1.0) -> "Sim3Transform":
        """Lift a rigid pose to Sim(3) with the given scale."""
        return cls(scale, pose.rotation, pose.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) points: s·R·p + t."""
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ self.rotation.T) + self.translation

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """Return self ∘ other (apply other first)."""
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "Sim3Transform":
        """Inverse similarity."""
        rt = self.rotation.T
        return Sim3Transform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    @property
    def rotation_deg(self) -> float:
        """Rotation angle in degrees."""
        return float(np.degrees(rotation_angle(self.rotation)))

    @property
    def translation_norm(self) -> float:
        """Euclidean norm of the translation."""
        return float(np.linalg.norm(self.translation))


@dataclass(frozen=True)
class PointMap:
    """Dense H×W grid of 3D points with a validity mask."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float32, copy=True)
        if points.ndim != 3 or points.shape[2] != 3 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError(f"PointMap points must be HxWx3 with H,W >= 1, got {points.shape}")
        valid = np.array(self.valid, dtype=bool, copy=True)
        if valid.shape != points.shape[:2]:
            raise ValueError(f"Validity mask {valid.shape} does not match points {points.shape}")
        if not np.all(np.isfinite(points[valid])):
            raise ValueError("PointMap has non-finite coordinates on valid pixels")
        points.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_points(cls, points: np.ndarray, valid: Optional[np.ndarray] = None) -> "PointMap":
        """Build a point map; pixels with non-finite coordinates are marked invalid."""
        points = np.asarray(points)
        finite = np.all(np.isfinite(points), axis=-1)
        mask = finite if valid is None else (np.asarray(valid, dtype=bool) & finite)
        return cls(points, mask)

    @property
    def height(self) -> int:
        """Pixel rows."""
        return int(self.points.shape[0])

    @property
    def width(self) -> int:
        """Pixel columns."""
        return int(self.points.shape[1])

    @property
    def shape(self):
        """(H, W)."""
        return self.valid.shape

    def valid_points(self) -> np.ndarray:
        """(N, 3) float64 array of the valid points in raster order."""
        return self.points[self.valid].astype(np.float64)

    def with_points(self, points: np.ndarray) -> "PointMap":
        """Copy with replaced coordinates on valid pixels (invalid pixels kept)."""
        merged = np.array(self.points, dtype=np.float32, copy=True)
        merged[self.valid] = np.asarray(points, dtype=np.float64)[self.valid]
        return PointMap(merged, self.valid)


@dataclass(frozen=True)
class ConfidenceMap:
    """H×W non-negative confidence scores."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 2:
            raise ValueError(f"ConfidenceMap must be HxW, got {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("ConfidenceMap entries must be finite and non-negative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        """(H, W)."""
        return self.values.shape


def compose_world_pose(reg: Sim3Transform, local: RigidPose) -> RigidPose:
    """World pose of a window-local camera: (R_w·R_t | s·R_w·t_t + t_w)."""
    return RigidPose(
        reg.rotation @ local.rotation,
        reg.scale * (reg.rotation @ local.translation) + reg.translation,
    )


def apply_sim3(reg: Sim3Transform, p) -> np.ndarray:
    """Map a point (or an array of points) by s·R·p + t."""
    return reg.apply(p)


def transform_pointmap(pose: RigidPose, pm: PointMap) -> PointMap:
    """Apply R·p + t to every valid pixel; invalid pixels and the mask are unchanged."""
    return pm.with_points(pose.apply(pm.points))


def sim3_pointmap(reg: Sim3Transform, pm: PointMap) -> PointMap:
    """Apply a similarity transform to every valid pixel of a point map."""
    return pm.with_points(reg.apply(pm.points))
