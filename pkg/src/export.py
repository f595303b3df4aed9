"""Point cloud, trajectory and depth file writers and readers.

PLY files carry x, y, z float32 vertex properties (ASCII or binary little-endian);
trajectories use the TUM line format ``timestamp tx ty tz qx qy qz qw``.
Follows Single Responsibility Principle (SRP) - handles only file export.
"""

import logging
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from src.geometry import RigidPose
from src.metrics import Trajectory
from src.models import PlyFormat

logger = logging.getLogger(__name__)

QUATERNION_TIE = 1e-12
_PLY_FORMATS = {
    PlyFormat.ASCII: "ascii",
    PlyFormat.BINARY: "binary_little_endian",
}


class ExportError(Exception):
    """Raised for unreadable or malformed export files."""


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Centroid of the points in every occupied voxel (voxels ordered by first point)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if voxel <= 0 or points.shape[0] == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    sums = np.stack([np.bincount(inverse, weights=points[:, k]) for k in range(3)], axis=1)
    centroids = sums / counts[:, None]
    return centroids[np.argsort(first, kind="stable")]


def _ply_header(count: int, fmt: PlyFormat) -> bytes:
    lines = [
        "ply",
        f"format {_PLY_FORMATS[fmt]} 1.0",
        f"element vertex {count}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(points: np.ndarray, path: str, fmt: PlyFormat = PlyFormat.BINARY) -> int:
    """
    Write an (N, 3) cloud as PLY.

    Returns:
        Number of vertices written
    """
    vertices = np.ascontiguousarray(np.asarray(points).reshape(-1, 3), dtype="<f4")
    with open(path, "wb") as handle:
        handle.write(_ply_header(vertices.shape[0], fmt))
        if fmt == PlyFormat.BINARY:
            handle.write(vertices.tobytes())
        else:
            for x, y, z in vertices.astype(np.float64).tolist():
                handle.write(f"{x:.9g} {y:.9g} {z:.9g}\n".encode("ascii"))
    logger.debug("Wrote %d vertices to %s", vertices.shape[0], path)
    return int(vertices.shape[0])


def read_ply(path: str) -> np.ndarray:
    """
    Read the x, y, z float vertices of a PLY file written by ``write_ply``.

    Raises:
        ExportError: Unsupported or malformed file
    """
    with open(path, "rb") as handle:
        data = handle.read()
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise ExportError(f"{path} is not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(marker) :]
    fmt, count, properties = None, None, []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property":
            properties.append((parts[1], parts[2]))
    if count is None or properties != [("float", "x"), ("float", "y"), ("float", "z")]:
        raise ExportError(f"{path}: expected a vertex element with float x, y, z")
    if fmt == "binary_little_endian":
        if len(body) < count * 12:
            raise ExportError(f"{path}: truncated binary body")
        return np.frombuffer(body, "<f4", count * 3).reshape(count, 3).copy()
    if fmt == "ascii":
        values = np.array(body.split(), dtype=np.float32)
        if values.size != count * 3:
            raise ExportError(f"{path}: expected {count * 3} values, got {values.size}")
        return values.reshape(count, 3)
    raise ExportError(f"{path}: unsupported PLY format {fmt}")


def rotation_to_quaternion(rotation: np.ndarray) -> np.ndarray:
    """
    Unit quaternion (x, y, z, w) with w >= 0.

    When |w| is within 1e-12 of zero the sign is fixed by the first non-zero of
    z, y, x being positive; negative zeros are normalized away.
    """
    quat = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat()
    quat = quat / np.linalg.norm(quat)
    if abs(quat[3]) <= QUATERNION_TIE:
        quat[3] = 0.0
        for component in (2, 1, 0):
            if quat[component] != 0.0:
                if quat[component] < 0:
                    quat = -quat
                break
    elif quat[3] < 0:
        quat = -quat
    return quat + 0.0


def format_tum_line(timestamp: float, pose: RigidPose) -> str:
    """One TUM trajectory line with 9 significant digits."""
    values = list(pose.translation + 0.0) + list(rotation_to_quaternion(pose.rotation))
    return f"{timestamp:.9f} " + " ".join(f"{v + 0.0:.9g}" for v in values)


def write_tum(trajectory: Trajectory, path: str) -> int:
    """Write a trajectory in TUM format; returns the number of poses."""
    if len(trajectory) == 0:
        raise ExportError("Cannot export an empty trajectory")
    with open(path, "w", encoding="ascii") as handle:
        for timestamp, pose in trajectory:
            handle.write(format_tum_line(timestamp, pose) + "\n")
    return len(trajectory)


def read_tum(path: str) -> Trajectory:
    """Read a TUM trajectory ('#' comments allowed)."""
    timestamps: List[float] = []
    poses: List[RigidPose] = []
    with open(path, "r", encoding="ascii") as handle:
        for lineno, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != 8:
                raise ExportError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
            values = [float(v) for v in fields]
            rotation = Rotation.from_quat(values[4:8]).as_matrix()
            timestamps.append(values[0])
            poses.append(RigidPose(rotation, values[1:4]))
    return Trajectory(timestamps, poses)


def write_depths(
    path: str, timestamps: Sequence[int], depths: Union[np.ndarray, Sequence[np.ndarray]]
) -> None:
    """Store per-frame depth grids (NaN = invalid) as a compressed array archive."""
    np.savez_compressed(
        path,
        timestamps=np.asarray(timestamps, dtype=np.int64),
        depths=np.asarray(depths, dtype=np.float32),
    )


def read_depths(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Load (timestamps, depths) written by ``write_depths``."""
    with np.load(path) as archive:
        return archive["timestamps"], archive["depths"]


def export_pointcloud(
    global_map, path: str, fmt: PlyFormat = PlyFormat.BINARY, voxel: float = 0.0
) -> int:
    """
    Write the accumulated world points of a map as PLY.

    Args:
        global_map: Object exposing ``points()`` (N, 3) or a bare point array
        path: Output file
        fmt: ASCII or binary little-endian
        voxel: Optional voxel size for export-only downsampling (0 = off)

    Raises:
        ExportError: Empty map
    """
    points = global_map.points() if hasattr(global_map, "points") else np.asarray(global_map)
    points = np.asarray(points).reshape(-1, 3)
    if points.shape[0] == 0:
        raise ExportError("Cannot export an empty point cloud")
    if voxel > 0:
        points = voxel_downsample(points, voxel)
    return write_ply(points, path, fmt)


def export_trajectory(trajectory: Trajectory, path: str) -> int:
    """Legacy wrapper for write_tum()."""
    return write_tum(trajectory, path)
