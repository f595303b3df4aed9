"""Layer-wise scale alignment.

Segments world-aligned pseudo-depth into layers, links layers of the previous and the
current window with IoU-weighted edges, estimates a robust scale on every inter-window
edge, propagates scales through time and rescales each pixel along its camera ray.

Follows Single Responsibility Principle (SRP) - handles only layer scale alignment.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.config import LsaConfig
from src.frame_executor import FrameExecutor
from src.geometry import NumericalError, PointMap
from src.models import EdgeKind, FramePrediction, StageTimings, WindowPrediction, WindowSpec
from src.registration import IrlsConfig, irls_scale
from src.segmentation import LayerLabelMap, SegmentationParams, segment_depth

logger = logging.getLogger(__name__)

Vertex = Tuple[int, int, int]


def pseudo_depth(pm_world: PointMap) -> np.ndarray:
    """World Z of every valid pixel (NaN elsewhere)."""
    depth = pm_world.points[..., 2].astype(np.float64)
    return np.where(pm_world.valid, depth, np.nan)


def layer_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a ∩ b| / |a ∪ b| of two boolean pixel masks (0 for an empty union)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def pairwise_iou(a: LayerLabelMap, b: LayerLabelMap) -> np.ndarray:
    """IoU matrix between every layer of ``a`` (rows) and of ``b`` (columns)."""
    ma, mb = a.layer_count, b.layer_count
    if ma == 0 or mb == 0:
        return np.zeros((ma, mb))
    both = (a.labels >= 0) & (b.labels >= 0)
    joint = np.bincount(
        a.labels[both].astype(np.int64) * mb + b.labels[both], minlength=ma * mb
    ).reshape(ma, mb)
    union = a.sizes()[:, None] + b.sizes()[None, :] - joint
    return np.divide(joint, union, out=np.zeros((ma, mb)), where=union > 0)


@dataclass(frozen=True)
class LayerEdge:
    """Directed IoU-weighted edge between two layers."""

    parent: Vertex
    child: Vertex
    weight: float
    kind: EdgeKind


@dataclass
class LayerGraph:
    """Directed acyclic graph over the layers of windows i−1 (overlap) and i."""

    vertices: List[Vertex] = field(default_factory=list)
    edges: List[LayerEdge] = field(default_factory=list)

    @property
    def inter_edges(self) -> List[LayerEdge]:
        """Edges across windows at shared timestamps."""
        return [e for e in self.edges if e.kind == EdgeKind.INTER]

    @property
    def intra_edges(self) -> List[LayerEdge]:
        """Temporal edges inside the current window."""
        return [e for e in self.edges if e.kind == EdgeKind.INTRA]

    def window_vertices(self, window_index: int) -> List[Vertex]:
        """Vertices of one window."""
        return [v for v in self.vertices if v[0] == window_index]

    def without_intra(self) -> "LayerGraph":
        """Copy keeping only the inter-window edges."""
        return LayerGraph(list(self.vertices), self.inter_edges)


def _vertices_of(label_map: LayerLabelMap) -> List[Vertex]:
    return [(label_map.window_index, label_map.timestamp, m) for m in range(label_map.layer_count)]


def _edges_between(
    parents: LayerLabelMap, children: LayerLabelMap, tau: float, kind: EdgeKind
) -> List[LayerEdge]:
    iou = pairwise_iou(parents, children)
    edges = []
    for m, n in zip(*np.nonzero(iou > tau)):
        edges.append(
            LayerEdge(
                (parents.window_index, parents.timestamp, int(m)),
                (children.window_index, children.timestamp, int(n)),
                float(iou[m, n]),
                kind,
            )
        )
    return edges


def build_layer_graph(
    prev_layers: Sequence[LayerLabelMap], curr_layers: Sequence[LayerLabelMap], tau: float
) -> LayerGraph:
    """
    Link layers with IoU > tau.

    Args:
        prev_layers: Label maps of window i−1 at the overlap timestamps
        curr_layers: Label maps of every frame of window i, in timestamp order
        tau: IoU threshold

    Returns:
        LayerGraph with inter edges (same timestamp, i−1 → i) followed by intra edges
        (t−1 → t inside window i)
    """
    curr_layers = sorted(curr_layers, key=lambda m: m.timestamp)
    curr_by_time = {m.timestamp: m for m in curr_layers}
    graph = LayerGraph()
    for label_map in sorted(prev_layers, key=lambda m: m.timestamp):
        graph.vertices.extend(_vertices_of(label_map))
    for label_map in curr_layers:
        graph.vertices.extend(_vertices_of(label_map))
    for label_map in sorted(prev_layers, key=lambda m: m.timestamp):
        child = curr_by_time.get(label_map.timestamp)
        if child is not None:
            graph.edges.extend(_edges_between(label_map, child, tau, EdgeKind.INTER))
    for parent, child in zip(curr_layers, curr_layers[1:]):
        graph.edges.extend(_edges_between(parent, child, tau, EdgeKind.INTRA))
    return graph


def estimate_layer_scale(
    source_depth: np.ndarray,
    target_depth: np.ndarray,
    intersection: np.ndarray,
    cfg: Optional[IrlsConfig] = None,
) -> float:
    """
    Huber IRLS scale s with s·source ≈ target over the pixels of an intersection mask.

    Raises:
        EmptyCorrespondenceError: Empty intersection
        EstimationError: All-zero source depths or non-finite values
    """
    mask = np.asarray(intersection, dtype=bool)
    source = np.asarray(source_depth, dtype=np.float64)[mask]
    target = np.asarray(target_depth, dtype=np.float64)[mask]
    return irls_scale(source, target, cfg).scale


@dataclass
class LayerScaleTable:
    """Accumulator A, weight W and final scale of every vertex of a window."""

    accumulator: Dict[Vertex, float] = field(default_factory=dict)
    weight: Dict[Vertex, float] = field(default_factory=dict)

    def scale(self, vertex: Vertex) -> float:
        """A/W when W > 0, else 1."""
        w = self.weight.get(vertex, 0.0)
        return self.accumulator[vertex] / w if w > 0 else 1.0

    @property
    def scales(self) -> Dict[Vertex, float]:
        """Final scale per vertex."""
        return {v: self.scale(v) for v in self.weight}

    def frame_scales(self, window_index: int, timestamp: int, layer_count: int) -> np.ndarray:
        """Scale per layer id of one frame."""
        return np.array(
            [self.scale((window_index, timestamp, m)) for m in range(layer_count)], dtype=np.float64
        )

    def is_identity(self) -> bool:
        """True when every vertex keeps scale 1."""
        return all(self.scale(v) == 1.0 for v in self.weight)


def propagate_scales(
    graph: LayerGraph,
    inter_scales: Mapping[LayerEdge, float],
    window: WindowSpec,
    use_intra: bool = True,
) -> LayerScaleTable:
    """
    Aggregate inter-edge scales and propagate them through time.

    Inter edges contribute w·ŝ to their child; then for every frame after the window's
    first, in increasing time, each intra edge whose parent has positive weight adds
    w·(A_parent / W_parent) to its child. Parents are read with whatever they have
    accumulated so far.

    Args:
        graph: Layer graph of windows i−1 and i
        inter_scales: Estimated scale per inter edge (edges without a scale are skipped)
        window: Window i
        use_intra: Disable to skip temporal propagation
    """
    table = LayerScaleTable()
    for vertex in graph.window_vertices(window.index):
        table.accumulator[vertex] = 0.0
        table.weight[vertex] = 0.0

    for edge in graph.inter_edges:
        if edge.child[0] != window.index or edge not in inter_scales:
            continue
        table.accumulator[edge.child] += edge.weight * inter_scales[edge]
        table.weight[edge.child] += edge.weight

    if use_intra:
        by_time: Dict[int, List[LayerEdge]] = {}
        for edge in graph.intra_edges:
            by_time.setdefault(edge.child[1], []).append(edge)
        for t in range(window.start + 1, window.end + 1):
            for edge in by_time.get(t, []):
                parent_weight = table.weight.get(edge.parent, 0.0)
                if parent_weight > 0:
                    mean = table.accumulator[edge.parent] / parent_weight
                    table.accumulator[edge.child] += edge.weight * mean
                    table.weight[edge.child] += edge.weight
    return table


def apply_layer_scales(
    pm_world: PointMap,
    labels: LayerLabelMap,
    table: LayerScaleTable,
    camera_center: np.ndarray,
) -> PointMap:
    """Move every valid pixel to c + s·(p − c) with its layer's scale s."""
    scales = table.frame_scales(labels.window_index, labels.timestamp, labels.layer_count)
    return scale_layers(pm_world, labels.labels, scales, camera_center)


def scale_layers(
    pm: PointMap, labels: np.ndarray, scales: np.ndarray, camera_center: np.ndarray
) -> PointMap:
    """Rescale pixels along camera rays with a per-label scale (label -1 is untouched)."""
    lookup = np.concatenate([np.asarray(scales, dtype=np.float64), [1.0]])
    pixel_scale = lookup[np.where(labels >= 0, labels, len(lookup) - 1)][..., None]
    center = np.asarray(camera_center, dtype=np.float64)
    points = pm.points.astype(np.float64)
    moved = np.where(pixel_scale == 1.0, points, center + pixel_scale * (points - center))
    return pm.with_points(moved)


@dataclass
class LsaResult:
    """Corrected window plus the scales and graph statistics that produced it."""

    prediction: WindowPrediction
    table: LayerScaleTable
    layer_count: int = 0
    inter_edges: int = 0
    intra_edges: int = 0
    dropped_edges: int = 0
    timings: StageTimings = field(default_factory=StageTimings)


def segmentation_params(config: LsaConfig) -> SegmentationParams:
    """Segmentation parameters of an LSA config section."""
    return SegmentationParams(config.seg_sigma, config.seg_k, config.seg_min_size_frac)


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def _camera_relative_depth(frame: FramePrediction) -> np.ndarray:
    return pseudo_depth(frame.pointmap) - frame.pose.translation[2]


def run_lsa(
    prev_world: Optional[WindowPrediction],
    curr_world: WindowPrediction,
    overlap: Sequence[int],
    params: Optional[LsaConfig] = None,
    irls: Optional[IrlsConfig] = None,
    executor: Optional[FrameExecutor] = None,
) -> LsaResult:
    """
    Correct layer depth misalignment of a registered window against its predecessor.

    Scales are estimated on depth measured from each frame's world camera centre
    (Z − c_z) and applied about that centre, so estimation and correction agree.

    Args:
        prev_world: Corrected previous window in world coordinates (None for window 1)
        curr_world: Registered current window
        overlap: Shared timestamps
        params: LSA settings
        irls: IRLS settings for the per-edge scale solve
        executor: Per-frame worker pool for segmentation
    """
    params = params or LsaConfig()
    if prev_world is None or not params.lsa_enabled or not overlap:
        return LsaResult(curr_world, LayerScaleTable())
    executor = executor or FrameExecutor()
    seg = segmentation_params(params)
    timings = StageTimings()

    start = time.perf_counter()
    jobs = [(prev_world.window.index, prev_world.frame(t)) for t in overlap]
    jobs += [(curr_world.window.index, f) for f in curr_world.frames]

    def segment(job) -> LayerLabelMap:
        window_index, frame = job
        return segment_depth(
            pseudo_depth(frame.pointmap), seg, frame.pointmap.valid, frame.timestamp, window_index
        )

    label_maps = executor.execute(segment, jobs)
    prev_labels = label_maps[: len(overlap)]
    curr_labels = label_maps[len(overlap) :]
    timings.ms_segment = _ms(start)

    start = time.perf_counter()
    graph = build_layer_graph(prev_labels, curr_labels, params.iou_tau)
    timings.ms_graph = _ms(start)

    start = time.perf_counter()
    prev_by_time = {m.timestamp: m for m in prev_labels}
    curr_by_time = {m.timestamp: m for m in curr_labels}
    inter_scales: Dict[LayerEdge, float] = {}
    depth_cache: Dict[Tuple[int, int], np.ndarray] = {}
    dropped = 0
    for edge in graph.inter_edges:
        t = edge.parent[1]
        if (0, t) not in depth_cache:
            depth_cache[(0, t)] = _camera_relative_depth(prev_world.frame(t))
            depth_cache[(1, t)] = _camera_relative_depth(curr_world.frame(t))
        intersection = prev_by_time[t].mask(edge.parent[2]) & curr_by_time[t].mask(edge.child[2])
        try:
            inter_scales[edge] = estimate_layer_scale(
                depth_cache[(1, t)], depth_cache[(0, t)], intersection, irls
            )
        except NumericalError as exc:
            dropped += 1
            logger.warning(
                "Window %d: dropping inter edge %s -> %s (%s)",
                curr_world.window.index,
                edge.parent,
                edge.child,
                exc,
            )
    timings.ms_scale_init = _ms(start)

    start = time.perf_counter()
    table = propagate_scales(graph, inter_scales, curr_world.window, params.lsa_intra)
    if table.is_identity():
        corrected = curr_world
    else:
        frames = [
            FramePrediction(
                f.timestamp,
                apply_layer_scales(f.pointmap, curr_by_time[f.timestamp], table, f.pose.translation),
                f.pose,
                f.confidence,
            )
            for f in curr_world.frames
        ]
        corrected = curr_world.replace_frames(frames)
    timings.ms_propagate = _ms(start)

    return LsaResult(
        corrected,
        table,
        layer_count=len(graph.window_vertices(curr_world.window.index)),
        inter_edges=len(graph.inter_edges),
        intra_edges=len(graph.intra_edges),
        dropped_edges=dropped,
        timings=timings,
    )
