"""Helpers for test assertions and random inputs to avoid code duplication."""

import numpy as np

from src.geometry import RigidPose, Sim3Transform, rotation_about_axis


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    """Rotation about a random axis by an angle in [0, max_angle)."""
    return rotation_about_axis(rng.normal(size=3), rng.uniform(0.0, max_angle))


def random_pose(rng: np.random.Generator, spread: float = 1.0) -> RigidPose:
    """Random rigid pose."""
    return RigidPose(random_rotation(rng), spread * rng.normal(size=3))


def random_sim3(rng: np.random.Generator, low: float = 0.5, high: float = 2.0) -> Sim3Transform:
    """Random similarity with log-uniform scale."""
    scale = float(np.exp(rng.uniform(np.log(low), np.log(high))))
    return Sim3Transform(scale, random_rotation(rng), rng.normal(size=3))


def assert_sim3_close(actual: Sim3Transform, expected: Sim3Transform, tol: float = 1e-6):
    """Assert two similarities agree in relative scale, rotation and translation."""
    assert abs(actual.scale / expected.scale - 1.0) <= tol, (actual.scale, expected.scale)
    assert np.linalg.norm(actual.rotation - expected.rotation) <= tol
    assert np.linalg.norm(actual.translation - expected.translation) <= tol * max(
        1.0, np.linalg.norm(expected.translation)
    )


def assert_same_partition(labels_a: np.ndarray, labels_b: np.ndarray):
    """Assert two label maps describe the same partition (labels may be permuted)."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    assert a.shape == b.shape
    pairs = set(zip(a.tolist(), b.tolist()))
    assert len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def make_prediction(window, height: int = 3, width: int = 4, seed: int = 0):
    """Random local-frame prediction with identity-rotation cameras for a WindowSpec."""
    from src.geometry import ConfidenceMap, PointMap
    from src.models import FramePrediction, WindowPrediction

    rng = np.random.default_rng(seed)
    frames = []
    for timestamp in window.frames:
        points = rng.normal(size=(height, width, 3)) + np.array([0.0, 0.0, -5.0])
        frames.append(
            FramePrediction(
                timestamp,
                PointMap(points, np.ones((height, width), dtype=bool)),
                RigidPose(np.eye(3), [0.1 * timestamp, 0.0, 0.0]),
                ConfidenceMap(rng.uniform(0.5, 1.0, size=(height, width))),
            )
        )
    return WindowPrediction(window, tuple(frames))
