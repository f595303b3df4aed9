"""Data models and constants for the alignment engine.

This module defines the window, prediction and diagnostics structures passed between
the ingestion, registration, LSA and export stages, plus the enums used by the
configuration layer.
Follows Single Responsibility Principle (SRP) - handles only data structures.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from src.geometry import ConfidenceMap, PointMap, RigidPose


class ExitCode(Enum):
    """Process exit codes of the command line surface."""

    SUCCESS = 0
    USAGE = 1
    DATA_ERROR = 2
    NUMERICAL_ERROR = 3


class InputMode(Enum):
    """Where window predictions come from."""

    FILES = "files"
    SYNTHETIC = "synthetic"


class CameraPath(Enum):
    """Parametric synthetic camera paths."""

    LINE = "line"
    ARC = "arc"
    ORBIT = "orbit"


class PlyFormat(Enum):
    """PLY encodings supported by the exporter."""

    ASCII = "ascii"
    BINARY = "binary"


class ScaleEstimator(Enum):
    """Submap scale estimator."""

    IRLS = "irls"
    CLOSED_FORM = "closed_form"


class RigidSource(Enum):
    """Point sets fed to Kabsch during submap registration."""

    ANCHORS = "anchors"
    POINTS = "points"


class DepthAlign(Enum):
    """Scale-only depth alignment strategy."""

    MEDIAN = "median"
    LSQ = "lsq"


class EdgeKind(Enum):
    """Layer graph edge classification."""

    INTER = "inter"
    INTRA = "intra"


class CoordinateFrame(Enum):
    """Reference frame of a window prediction."""

    LOCAL = "local"
    WORLD = "world"


@dataclass(frozen=True)
class WindowSpec:
    """One temporal window: 1-based index, 1-based start frame and frame count."""

    index: int
    start: int
    length: int

    def __post_init__(self):
        if self.index < 1 or self.start < 1 or self.length < 1:
            raise ValueError(f"Invalid window spec {self}")

    @property
    def end(self) -> int:
        """Last frame (inclusive)."""
        return self.start + self.length - 1

    @property
    def frames(self) -> List[int]:
        """Frame indices covered by the window."""
        return list(range(self.start, self.start + self.length))

    def overlap_with(self, previous: "WindowSpec") -> List[int]:
        """Frames shared with an earlier window."""
        return [t for t in self.frames if previous.start <= t <= previous.end]

    def to_dict(self) -> Dict:
        """Convert to dictionary representation."""
        return {"index": self.index, "start": self.start, "length": self.length}


@dataclass(frozen=True)
class FramePrediction:
    """Per-frame point map, camera pose and confidence."""

    timestamp: int
    pointmap: PointMap
    pose: RigidPose
    confidence: ConfidenceMap

    def __post_init__(self):
        if self.confidence.shape != self.pointmap.shape:
            raise ValueError(
                f"Confidence {self.confidence.shape} does not match point map "
                f"{self.pointmap.shape} at frame {self.timestamp}"
            )


@dataclass(frozen=True)
class WindowPrediction:
    """All frame predictions of one window, in the window's local or the world frame."""

    window: WindowSpec
    frames: Tuple[FramePrediction, ...]
    coordinate_frame: CoordinateFrame = CoordinateFrame.LOCAL

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) != self.window.length:
            raise ValueError(
                f"Window {self.window.index} declares {self.window.length} frames, "
                f"got {len(frames)}"
            )
        if [f.timestamp for f in frames] != self.window.frames:
            raise ValueError(f"Window {self.window.index} frame timestamps out of order")
        shapes = {f.pointmap.shape for f in frames}
        if len(shapes) > 1:
            raise ValueError(f"Window {self.window.index} mixes image sizes {sorted(shapes)}")

    @property
    def height(self) -> int:
        """Image rows."""
        return self.frames[0].pointmap.height

    @property
    def width(self) -> int:
        """Image columns."""
        return self.frames[0].pointmap.width

    @property
    def timestamps(self) -> List[int]:
        """Frame indices in order."""
        return [f.timestamp for f in self.frames]

    def frame(self, timestamp: int) -> FramePrediction:
        """Frame prediction at a timestamp."""
        offset = timestamp - self.window.start
        if offset < 0 or offset >= len(self.frames):
            raise KeyError(f"Frame {timestamp} not in window {self.window.index}")
        return self.frames[offset]

    def replace_frames(
        self, frames: List[FramePrediction], coordinate_frame: Optional[CoordinateFrame] = None
    ) -> "WindowPrediction":
        """Copy with new frames (and optionally a new coordinate frame)."""
        return WindowPrediction(
            self.window, tuple(frames), coordinate_frame or self.coordinate_frame
        )

    @property
    def nbytes(self) -> int:
        """Prediction payload size in bytes (point, validity and confidence arrays)."""
        return sum(
            f.pointmap.points.nbytes + f.pointmap.valid.nbytes + f.confidence.values.nbytes
            for f in self.frames
        )


@dataclass
class StageTimings:
    """Per-window stage timings in milliseconds."""

    ms_register: float = 0.0
    ms_segment: float = 0.0
    ms_graph: float = 0.0
    ms_scale_init: float = 0.0
    ms_propagate: float = 0.0


DIAGNOSTICS_COLUMNS = (
    "window",
    "scale",
    "rot_deg",
    "trans",
    "layers",
    "inter_edges",
    "intra_edges",
    "ms_register",
    "ms_segment",
    "ms_graph",
    "ms_propagate",
)


@dataclass
class WindowDiagnostics:
    """Registration and LSA diagnostics of one window."""

    window: int
    scale: float
    rot_deg: float
    trans: float
    layers: int = 0
    inter_edges: int = 0
    intra_edges: int = 0
    correspondences: int = 0
    fallback: Optional[str] = None
    timings: StageTimings = field(default_factory=StageTimings)

    def to_dict(self) -> Dict:
        """Convert to dictionary representation."""
        result = {
            "window": self.window,
            "scale": self.scale,
            "rot_deg": self.rot_deg,
            "trans": self.trans,
            "layers": self.layers,
            "inter_edges": self.inter_edges,
            "intra_edges": self.intra_edges,
            "correspondences": self.correspondences,
            "ms_register": self.timings.ms_register,
            "ms_segment": self.timings.ms_segment,
            "ms_graph": self.timings.ms_graph,
            "ms_scale_init": self.timings.ms_scale_init,
            "ms_propagate": self.timings.ms_propagate,
        }
        if self.fallback:
            result["fallback"] = self.fallback
        return result

    def csv_row(self) -> List[str]:
        """Row in DIAGNOSTICS_COLUMNS order; ms_propagate includes scale initialisation."""
        t = self.timings
        return [
            str(self.window),
            f"{self.scale:.9g}",
            f"{self.rot_deg:.9g}",
            f"{self.trans:.9g}",
            str(self.layers),
            str(self.inter_edges),
            str(self.intra_edges),
            f"{t.ms_register:.3f}",
            f"{t.ms_segment:.3f}",
            f"{t.ms_graph:.3f}",
            f"{t.ms_scale_init + t.ms_propagate:.3f}",
        ]


@dataclass
class RunSummary:
    """Summary of a streaming run.

    ``peak_retained_windows`` and ``peak_retained_bytes`` are measured from the window
    predictions still alive at the consumer's checkpoints. The window time trend is
    the least-squares slope of per-window processing time against window index.
    """

    windows: int
    frames: int
    points: int
    fallbacks: int
    peak_retained_windows: int
    elapsed_s: float
    peak_retained_bytes: int = 0
    window_ms_slope: float = 0.0
    window_ms_p_value: float = 1.0

    def to_dict(self) -> Dict:
        """Convert to dictionary representation."""
        return {
            "windows": self.windows,
            "frames": self.frames,
            "points": self.points,
            "fallbacks": self.fallbacks,
            "peak_retained_windows": self.peak_retained_windows,
            "peak_retained_bytes": self.peak_retained_bytes,
            "elapsed_s": round(self.elapsed_s, 3),
            "window_ms_slope": self.window_ms_slope,
            "window_ms_p_value": self.window_ms_p_value,
        }
