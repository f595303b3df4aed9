"""Streaming alignment pipeline.

This module drives the window stream: a producer thread loads (or generates) window
predictions into a bounded queue, and the consumer registers each window into the
world frame, corrects its layer scales and appends it to the global map.
Follows Single Responsibility Principle (SRP) - handles only stream orchestration.
"""

import gc
import glob
import logging
import os
import queue
import threading
import time
import weakref
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Protocol, Set, Tuple, Union

import numpy as np

from src.config import PipelineConfig
from src.container import HEADER, ContainerError, decode_header, read_window_predictions
from src.export import export_pointcloud, write_depths, write_tum
from src.frame_executor import FrameExecutor
from src.geometry import Sim3Transform
from src.lsa import run_lsa
from src.metrics import SequenceMetrics, Trajectory, evaluate_sequence, time_trend
from src.models import (
    InputMode,
    RunSummary,
    StageTimings,
    WindowDiagnostics,
    WindowPrediction,
    WindowSpec,
)
from src.registration import IrlsConfig, SubmapRegistrar, to_world
from src.report import DiagnosticsWriter
from src.synthetic import SyntheticScene, emit_window, generate_scene, ground_truth_arrays
from src.windowing import schedule_windows

logger = logging.getLogger(__name__)

WINDOW_FILE_PATTERN = "window_*.win"
PUT_TIMEOUT_S = 0.1


class InputError(Exception):
    """Raised when a window prediction cannot be obtained."""

    def __init__(self, window_index: int, cause: Union[Exception, str]):
        self.window_index = window_index
        self.cause = cause
        super().__init__(f"Window {window_index}: {cause}")


def window_filename(index: int) -> str:
    """File name of a window container inside the input directory."""
    return f"window_{index:04d}.win"


class PredictionSource(Protocol):
    """Anything that can schedule and load window predictions."""

    def windows(self) -> List[WindowSpec]:
        """Window schedule in processing order."""

    def load(self, spec: WindowSpec) -> WindowPrediction:
        """Prediction of one scheduled window."""


class SyntheticSource:
    """Generates corrupted window predictions from a synthetic scene."""

    def __init__(self, scene: SyntheticScene, window_len: int, overlap: int):
        self.scene = scene
        self.window_len = window_len
        self.overlap = overlap

    def windows(self) -> List[WindowSpec]:
        """Schedule over the whole scene."""
        return schedule_windows(self.scene.frame_count, self.window_len, self.overlap)

    def load(self, spec: WindowSpec) -> WindowPrediction:
        """Emit the window's prediction."""
        return emit_window(self.scene, spec)


class FileSource:
    """Reads window containers (``window_NNNN.win``) from a directory.

    The schedule comes from the container headers, so a directory written with any
    window length can be replayed.
    """

    def __init__(self, input_dir: str):
        self.input_dir = input_dir
        self._paths: Dict[int, str] = {}

    def windows(self) -> List[WindowSpec]:
        """
        Read every header and validate the chain of windows.

        Raises:
            InputError: Missing directory, no containers, unreadable header or a gap
        """
        if not os.path.isdir(self.input_dir):
            raise InputError(0, f"input directory {self.input_dir} does not exist")
        paths = sorted(glob.glob(os.path.join(self.input_dir, WINDOW_FILE_PATTERN)))
        if not paths:
            raise InputError(0, f"no {WINDOW_FILE_PATTERN} files in {self.input_dir}")
        specs = []
        for path in paths:
            with open(path, "rb") as handle:
                head = handle.read(HEADER.size)
            try:
                header = decode_header(head)
            except ContainerError as exc:
                raise InputError(0, f"{os.path.basename(path)}: {exc}") from exc
            if header.window_index in self._paths:
                raise InputError(header.window_index, "window stored in more than one file")
            self._paths[header.window_index] = path
            specs.append(header.window())
        specs.sort(key=lambda s: s.index)
        previous: Optional[WindowSpec] = None
        for spec in specs:
            expected = 1 if previous is None else previous.index + 1
            if spec.index != expected:
                raise InputError(expected, "window file missing")
            if previous is None and spec.start != 1:
                raise InputError(spec.index, f"first window starts at frame {spec.start}")
            if previous is not None and not spec.overlap_with(previous):
                raise InputError(spec.index, f"no overlap with window {previous.index}")
            previous = spec
        return specs

    def load(self, spec: WindowSpec) -> WindowPrediction:
        """Decode one container, checking it holds ``spec``."""
        path = self._paths.get(spec.index) or os.path.join(
            self.input_dir, window_filename(spec.index)
        )
        try:
            return read_window_predictions(path, spec)
        except (ContainerError, OSError) as exc:
            raise InputError(spec.index, exc) from exc


class GlobalMap:
    """World-frame point chunks, trajectory and depths of every emitted frame.

    Overlap frames keep their first emission.
    """

    def __init__(self, keep_points: bool = True, keep_depths: bool = True):
        self.keep_points = keep_points
        self.keep_depths = keep_depths
        self._chunks: List[np.ndarray] = []
        self._timestamps: List[int] = []
        self._poses = []
        self._depths: List[np.ndarray] = []
        self._emitted: Set[int] = set()
        self._point_count = 0

    def append(self, pred: WindowPrediction) -> int:
        """
        Add the frames of a world-frame window that were not emitted before.

        Returns:
            Number of frames added
        """
        added = 0
        for frame in pred.frames:
            if frame.timestamp in self._emitted:
                continue
            self._emitted.add(frame.timestamp)
            self._timestamps.append(frame.timestamp)
            self._poses.append(frame.pose)
            points = frame.pointmap.valid_points()
            self._point_count += points.shape[0]
            if self.keep_points:
                self._chunks.append(np.asarray(points, dtype=np.float32))
            if self.keep_depths:
                self._depths.append(frame_depth(frame))
            added += 1
        return added

    @property
    def frame_count(self) -> int:
        """Number of emitted frames."""
        return len(self._timestamps)

    @property
    def point_count(self) -> int:
        """Number of valid world points emitted."""
        return self._point_count

    @property
    def trajectory(self) -> Trajectory:
        """Estimated world trajectory in timestamp order."""
        order = np.argsort(self._timestamps, kind="stable")
        return Trajectory([self._timestamps[i] for i in order], [self._poses[i] for i in order])

    def points(self) -> np.ndarray:
        """All retained world points as one (N, 3) array."""
        if not self._chunks:
            return np.zeros((0, 3), dtype=np.float32)
        return np.concatenate(self._chunks, axis=0)

    def depths(self) -> Tuple[np.ndarray, np.ndarray]:
        """(timestamps, depth grids) in timestamp order; NaN marks invalid pixels."""
        order = np.argsort(self._timestamps, kind="stable")
        timestamps = np.asarray(self._timestamps, dtype=np.int64)[order]
        if not self._depths:
            return timestamps, np.zeros((0, 0, 0), dtype=np.float32)
        return timestamps, np.stack([self._depths[i] for i in order])


def frame_depth(frame) -> np.ndarray:
    """Depth along the viewing axis (camera looks down -z); NaN where invalid."""
    pose = frame.pose
    camera = (frame.pointmap.points.astype(np.float64) - pose.translation) @ pose.rotation
    depth = -camera[..., 2]
    return np.where(frame.pointmap.valid, depth, np.nan).astype(np.float32)


class RetentionTracker:
    """Measures the window predictions the consumer keeps alive.

    Every prediction the consumer receives or derives is tracked by weak reference, so a
    window counts as retained only while something still refers to one of its
    predictions. Checkpoints record the peak number of distinct windows and bytes.
    """

    def __init__(self):
        self._live: "weakref.WeakValueDictionary[int, WindowPrediction]" = (
            weakref.WeakValueDictionary()
        )
        self.peak_windows = 0
        self.peak_bytes = 0

    def track(self, *predictions: WindowPrediction):
        """Start watching predictions (the same object may be passed twice)."""
        for pred in predictions:
            self._live[id(pred)] = pred

    def _alive(self) -> List[WindowPrediction]:
        return list(self._live.values())

    def checkpoint(self) -> int:
        """
        Count the windows alive now and update the peaks.

        A count above the current peak is confirmed after a garbage collection pass,
        so unreachable cycles are not reported as retained.

        Returns:
            Number of distinct windows with a live prediction
        """
        windows = {pred.window.index for pred in self._alive()}
        if len(windows) > self.peak_windows:
            gc.collect()
            windows = {pred.window.index for pred in self._alive()}
        alive_bytes = sum(pred.nbytes for pred in self._alive())
        self.peak_windows = max(self.peak_windows, len(windows))
        self.peak_bytes = max(self.peak_bytes, alive_bytes)
        return len(windows)


@dataclass
class _PreviousWindow:
    registered: WindowPrediction
    corrected: WindowPrediction
    transform: Sim3Transform


@dataclass
class _Failure:
    window_index: int
    error: Exception


_END = object()


@dataclass
class StreamResult:
    """Outcome of a streaming run."""

    global_map: GlobalMap
    diagnostics: List[WindowDiagnostics]
    registrations: List[Sim3Transform]
    summary: RunSummary
    windows: List[WindowSpec] = field(default_factory=list)
    window_ms: List[float] = field(default_factory=list)


def _put(out_queue: queue.Queue, item, stop: threading.Event) -> bool:
    while not stop.is_set():
        try:
            out_queue.put(item, timeout=PUT_TIMEOUT_S)
            return True
        except queue.Full:
            continue
    return False


def _produce(source, specs: List[WindowSpec], out_queue: queue.Queue, stop: threading.Event):
    for spec in specs:
        if stop.is_set():
            return
        try:
            item = source.load(spec)
        except Exception as exc:  # pylint: disable=broad-except
            _put(out_queue, _Failure(spec.index, exc), stop)
            return
        if not _put(out_queue, (spec, item), stop):
            return
    _put(out_queue, _END, stop)


class StreamingPipeline:
    """Registers and corrects a window stream into a global map.

    Follows Producer-Consumer Pattern - loading runs on its own thread, registration
    and LSA run sequentially in window order on the caller's thread.
    """

    def __init__(
        self,
        config: Optional[PipelineConfig] = None,
        executor: Optional[FrameExecutor] = None,
        keep_points: bool = True,
    ):
        self.config = config or PipelineConfig()
        self.executor = executor or FrameExecutor()
        self.registrar = SubmapRegistrar(self.config.registration)
        self.irls = IrlsConfig.from_registration_config(self.config.registration)
        self.keep_points = keep_points

    def iter_windows(
        self, source: PredictionSource
    ) -> Iterator[Tuple[WindowSpec, WindowPrediction]]:
        """
        Yield (spec, prediction) pairs loaded by a producer thread.

        Raises:
            InputError: A window could not be loaded (names the window index)
        """
        specs = source.windows()
        out_queue: queue.Queue = queue.Queue(maxsize=self.config.output.queue_capacity)
        stop = threading.Event()
        producer = threading.Thread(
            target=_produce, args=(source, specs, out_queue, stop), name="window-producer"
        )
        producer.daemon = True
        producer.start()
        try:
            while True:
                item = out_queue.get()
                if item is _END:
                    return
                if isinstance(item, _Failure):
                    if isinstance(item.error, InputError):
                        raise item.error
                    raise InputError(item.window_index, item.error) from item.error
                yield item
        finally:
            stop.set()
            producer.join()

    def run(self, source: PredictionSource) -> StreamResult:
        """
        Process every window of a source.

        Returns:
            StreamResult with the global map, per-window diagnostics and registrations

        Raises:
            InputError: When the source fails; estimator failures never abort the run
        """
        started = time.perf_counter()
        global_map = GlobalMap(keep_points=self.keep_points)
        tracker = RetentionTracker()
        diagnostics: List[WindowDiagnostics] = []
        registrations: List[Sim3Transform] = []
        windows: List[WindowSpec] = []
        window_ms: List[float] = []
        previous: Optional[_PreviousWindow] = None

        for spec, curr in self.iter_windows(source):
            window_start = time.perf_counter()
            tracker.track(curr)
            current, diag = self._process(previous, curr)
            tracker.track(current.registered, current.corrected)
            tracker.checkpoint()
            global_map.append(current.corrected)
            previous = current
            tracker.checkpoint()
            window_ms.append((time.perf_counter() - window_start) * 1000.0)
            diagnostics.append(diag)
            registrations.append(current.transform)
            windows.append(spec)
            logger.info(
                "Window %d: s=%.6g rot=%.4g deg trans=%.4g layers=%d",
                spec.index,
                diag.scale,
                diag.rot_deg,
                diag.trans,
                diag.layers,
            )

        trend = time_trend(window_ms)
        summary = RunSummary(
            windows=len(diagnostics),
            frames=global_map.frame_count,
            points=global_map.point_count,
            fallbacks=sum(1 for d in diagnostics if d.fallback),
            peak_retained_windows=tracker.peak_windows,
            elapsed_s=time.perf_counter() - started,
            peak_retained_bytes=tracker.peak_bytes,
            window_ms_slope=trend.slope,
            window_ms_p_value=trend.p_value,
        )
        return StreamResult(global_map, diagnostics, registrations, summary, windows, window_ms)

    def _process(
        self, previous: Optional[_PreviousWindow], curr: WindowPrediction
    ) -> Tuple[_PreviousWindow, WindowDiagnostics]:
        spec = curr.window
        overlap = spec.overlap_with(previous.registered.window) if previous else []

        # Registration pairs pre-LSA geometry of both windows, so the trajectory does not
        # depend on whether LSA runs.
        start = time.perf_counter()
        reg = self.registrar.register(
            previous.registered if previous else None,
            curr,
            overlap,
            previous.transform if previous else None,
        )
        registered = to_world(curr, reg.transform)
        ms_register = (time.perf_counter() - start) * 1000.0

        lsa = run_lsa(
            previous.corrected if previous else None,
            registered,
            overlap,
            self.config.lsa,
            self.irls,
            self.executor,
        )
        timings = StageTimings(
            ms_register=ms_register,
            ms_segment=lsa.timings.ms_segment,
            ms_graph=lsa.timings.ms_graph,
            ms_scale_init=lsa.timings.ms_scale_init,
            ms_propagate=lsa.timings.ms_propagate,
        )
        diag = WindowDiagnostics(
            window=spec.index,
            scale=reg.transform.scale,
            rot_deg=reg.transform.rotation_deg,
            trans=reg.transform.translation_norm,
            layers=lsa.layer_count,
            inter_edges=lsa.inter_edges,
            intra_edges=lsa.intra_edges,
            correspondences=reg.correspondences,
            fallback=reg.fallback,
            timings=timings,
        )
        return _PreviousWindow(registered, lsa.prediction, reg.transform), diag


def build_source(config: PipelineConfig) -> PredictionSource:
    """Prediction source selected by ``input_mode``."""
    if config.output.input_mode == InputMode.SYNTHETIC:
        scene = generate_scene(config.scene)
        return SyntheticSource(scene, config.window.window_len, config.window.overlap)
    return FileSource(config.output.input_dir)


def run_stream(
    config: Optional[PipelineConfig] = None,
    source: Optional[PredictionSource] = None,
    threads: Optional[int] = None,
) -> StreamResult:
    """
    Run the streaming pipeline.

    Args:
        config: Pipeline configuration (defaults)
        source: Prediction source; defaults to the one selected by ``input_mode``
        threads: Per-frame worker count; defaults to LASER_THREADS
    """
    config = config or PipelineConfig()
    source = source or build_source(config)
    pipeline = StreamingPipeline(config, FrameExecutor(threads))
    return pipeline.run(source)


def write_outputs(result: StreamResult, config: PipelineConfig) -> List[str]:
    """
    Write the enabled run artifacts into ``output_dir``.

    Returns:
        Paths written
    """
    out = config.output
    os.makedirs(out.output_dir, exist_ok=True)
    written = []
    if out.export_trajectory:
        path = os.path.join(out.output_dir, "trajectory.txt")
        write_tum(result.global_map.trajectory, path)
        written.append(path)
    if out.export_points:
        path = os.path.join(out.output_dir, "points.ply")
        export_pointcloud(result.global_map, path, out.ply_format, out.export_voxel)
        written.append(path)
    if out.export_diagnostics:
        path = os.path.join(out.output_dir, "diagnostics.csv")
        DiagnosticsWriter(path).write(result.diagnostics)
        written.append(path)
    if out.export_depths:
        path = os.path.join(out.output_dir, "depths.npz")
        timestamps, depths = result.global_map.depths()
        write_depths(path, timestamps, depths)
        written.append(path)
    for path in written:
        logger.debug("Wrote %s", path)
    return written


def evaluate_against_scene(
    result: StreamResult, scene: SyntheticScene, config: Optional[PipelineConfig] = None
) -> SequenceMetrics:
    """Metrics of a synthetic run against the scene's ground truth."""
    config = config or PipelineConfig()
    timestamps, est_depths = result.global_map.depths()
    _, gt_depths, gt_points = ground_truth_arrays(scene, list(timestamps))
    est_points = result.global_map.points() if result.global_map.keep_points else None
    return evaluate_sequence(
        result.global_map.trajectory,
        scene.trajectory,
        est_depths if result.global_map.keep_depths else None,
        gt_depths,
        est_points,
        gt_points if est_points is not None else None,
        config.metrics,
    )
