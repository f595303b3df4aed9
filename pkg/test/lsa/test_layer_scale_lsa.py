"""
Tests for src/lsa.py layer graph, scale propagation and window correction.
"""

import os
import sys

import numpy as np
import pytest

from src.config import LsaConfig
from src.geometry import PointMap
from src.models import EdgeKind, WindowSpec
from src.lsa import (
    LayerEdge,
    LayerGraph,
    LayerScaleTable,
    apply_layer_scales,
    build_layer_graph,
    estimate_layer_scale,
    layer_iou,
    pairwise_iou,
    propagate_scales,
    run_lsa,
    scale_layers,
)
from src.registration import EmptyCorrespondenceError, to_world
from src.segmentation import LayerLabelMap
from src.synthetic import emit_window, generate_scene

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))


def _edge(parent, child, weight, kind=EdgeKind.INTER):
    return LayerEdge(parent, child, weight, kind)


def test_layer_iou_basic():
    """
    Test IoU of overlapping, disjoint and empty masks.
    """
    a = np.array([[1, 1, 0, 0]], dtype=bool)
    b = np.array([[0, 1, 1, 0]], dtype=bool)
    assert layer_iou(a, b) == pytest.approx(1 / 3)
    assert layer_iou(a, ~a) == 0.0
    assert layer_iou(np.zeros(4, dtype=bool), np.zeros(4, dtype=bool)) == 0.0


def test_pairwise_iou_matches_mask_iou(rng):
    """
    Test the vectorized IoU matrix against mask-by-mask IoU.
    """
    a = LayerLabelMap(rng.integers(-1, 4, size=(9, 11)))
    b = LayerLabelMap(rng.integers(-1, 3, size=(9, 11)))
    matrix = pairwise_iou(a, b)
    assert matrix.shape == (a.layer_count, b.layer_count)
    for m in range(a.layer_count):
        for n in range(b.layer_count):
            assert matrix[m, n] == pytest.approx(layer_iou(a.mask(m), b.mask(n)))


def test_build_layer_graph_links_by_strict_iou_threshold():
    """
    Test inter edges at shared timestamps, intra edges between consecutive frames.
    """
    left_right = np.array([[0, 0, 1, 1]] * 2)
    shifted = np.array([[0, 0, 0, 1]] * 2)
    prev = [LayerLabelMap(left_right, timestamp=3, window_index=1)]
    curr = [
        LayerLabelMap(shifted, timestamp=4, window_index=2),
        LayerLabelMap(left_right, timestamp=3, window_index=2),
    ]
    graph = build_layer_graph(prev, curr, tau=0.5)
    inter = {(e.parent, e.child) for e in graph.inter_edges}
    assert inter == {((1, 3, 0), (2, 3, 0)), ((1, 3, 1), (2, 3, 1))}
    intra = {(e.parent, e.child): e.weight for e in graph.intra_edges}
    # IoU(left, left+1) = 2/3 passes; IoU(right, last column) = 1/2 does not
    assert intra == {((2, 3, 0), (2, 4, 0)): pytest.approx(2 / 3)}
    assert len(graph.window_vertices(2)) == 4
    assert graph.without_intra().intra_edges == []


def _propagation_case():
    inter = {
        _edge((1, 4, 0), (2, 4, 0), 0.8): 2.0,
        _edge((1, 4, 1), (2, 4, 0), 0.2): 1.0,
        _edge((1, 5, 0), (2, 5, 0), 0.5): 3.0,
    }
    dropped = _edge((1, 4, 2), (2, 4, 1), 0.9)
    intra = [
        _edge((2, 5, 0), (2, 6, 0), 1.0, EdgeKind.INTRA),
        _edge((2, 4, 1), (2, 5, 0), 0.7, EdgeKind.INTRA),
        _edge((2, 4, 0), (2, 5, 0), 0.5, EdgeKind.INTRA),
    ]
    vertices = [(2, 4, 0), (2, 4, 1), (2, 5, 0), (2, 6, 0), (2, 6, 1)]
    graph = LayerGraph(vertices, list(inter) + [dropped] + intra)
    return graph, inter


def test_propagate_scales_hand_computed():
    """
    Test weighted inter averages followed by time-ordered intra propagation.
    """
    graph, inter = _propagation_case()
    table = propagate_scales(graph, inter, WindowSpec(2, 4, 3))
    assert table.scale((2, 4, 0)) == pytest.approx(1.8)
    assert table.scale((2, 4, 1)) == 1.0
    assert table.scale((2, 5, 0)) == pytest.approx(2.4)
    assert table.scale((2, 6, 0)) == pytest.approx(2.4)
    assert table.scale((2, 6, 1)) == 1.0
    assert set(table.scales) == set(graph.vertices)


def test_propagate_scales_without_intra_edges():
    """
    Test disabling temporal propagation keeps only inter-window estimates.
    """
    graph, inter = _propagation_case()
    table = propagate_scales(graph, inter, WindowSpec(2, 4, 3), use_intra=False)
    assert table.scale((2, 5, 0)) == pytest.approx(3.0)
    assert table.scale((2, 6, 0)) == 1.0


def test_estimate_layer_scale_uses_intersection_only():
    """
    Test the per-edge scale ignores pixels outside the intersection.
    """
    source = np.array([[1.0, 2.0], [3.0, 100.0]])
    target = 0.5 * source
    target[1, 1] = -7.0
    mask = np.array([[True, True], [True, False]])
    assert estimate_layer_scale(source, target, mask) == pytest.approx(0.5)
    with pytest.raises(EmptyCorrespondenceError):
        estimate_layer_scale(source, target, np.zeros((2, 2), dtype=bool))


def test_apply_layer_scales_moves_along_rays_and_keeps_unit_layers():
    """
    Test s = 1 layers and unlabelled pixels are bit-identical, others move about the centre.
    """
    rng = np.random.default_rng(3)
    points = rng.normal(size=(2, 3, 3)).astype(np.float32)
    pm = PointMap(points, np.ones((2, 3), dtype=bool))
    labels = LayerLabelMap(np.array([[0, 0, 1], [1, -1, 0]]), timestamp=7, window_index=2)
    table = LayerScaleTable({(2, 7, 0): 1.0, (2, 7, 1): 4.0}, {(2, 7, 0): 1.0, (2, 7, 1): 2.0})
    center = np.array([0.5, -0.5, 1.0])
    out = apply_layer_scales(pm, labels, table, center)
    unchanged = labels.labels != 1
    assert np.array_equal(out.points[unchanged], pm.points[unchanged])
    moved = labels.labels == 1
    expected = center + 2.0 * (pm.points[moved].astype(np.float64) - center)
    assert np.allclose(out.points[moved], expected, atol=1e-5)


def test_scale_layers_identity_is_exact():
    """
    Test unit scales leave every coordinate untouched.
    """
    pm = PointMap(np.random.default_rng(0).normal(size=(3, 3, 3)), np.ones((3, 3), dtype=bool))
    out = scale_layers(pm, np.zeros((3, 3), dtype=int), np.ones(1), np.zeros(3))
    assert np.array_equal(out.points, pm.points)


@pytest.fixture
def registered_pair(small_scene_config):
    """Ground-truth first window and the exactly registered second window."""
    scene = generate_scene(small_scene_config)
    first = emit_window(scene, WindowSpec(1, 1, 10))
    spec = WindowSpec(2, 8, 10)
    second = to_world(emit_window(scene, spec), scene.true_registration(spec))
    return scene, first, second


def test_run_lsa_restores_layer_depths(registered_pair):
    """
    Test per-layer mis-scales are undone on every frame of the window.
    """
    scene, first, second = registered_pair
    before = max(
        np.abs(second.frame(t).pointmap.points - scene.frame(t).points).max() for t in range(8, 18)
    )
    assert before > 0.1
    result = run_lsa(first, second, [8, 9, 10])
    assert result.inter_edges > 0 and result.intra_edges > 0
    assert result.dropped_edges == 0
    assert result.layer_count == len(result.table.scales)
    for t in range(8, 18):
        error = np.abs(result.prediction.frame(t).pointmap.points - scene.frame(t).points).max()
        assert error < 1e-3, t


def test_run_lsa_passthrough_cases(registered_pair):
    """
    Test the first window and a disabled stage return the input unchanged.
    """
    _, first, second = registered_pair
    assert run_lsa(None, first, []).prediction is first
    disabled = run_lsa(first, second, [8, 9, 10], LsaConfig(lsa_enabled=False))
    assert disabled.prediction is second
    assert disabled.table.is_identity()


def _random_propagation_graph(rng):
    """Random two-window layer graph of at most 30 current-window vertices."""
    start = int(rng.integers(3, 9))
    length = int(rng.integers(2, 7))
    window = WindowSpec(2, start, length)
    shared = int(rng.integers(1, length))
    curr = []
    for t in window.frames:
        layers = int(rng.integers(1, 5))
        if len(curr) + layers > 30:
            layers = max(1, 30 - len(curr))
        curr.extend((2, t, m) for m in range(layers))
    curr = curr[:30]
    prev = [(1, t, m) for t in window.frames[:shared] for m in range(int(rng.integers(1, 4)))]
    inter = {}
    for parent in prev:
        for child in curr:
            if child[1] == parent[1] and rng.random() < 0.5:
                edge = _edge(parent, child, float(rng.uniform(0.3, 1.0)))
                inter[edge] = float(rng.uniform(0.5, 2.0))
    intra = []
    for parent in curr:
        for child in curr:
            if child[1] == parent[1] + 1 and rng.random() < 0.4:
                intra.append(_edge(parent, child, float(rng.uniform(0.3, 1.0)), EdgeKind.INTRA))
    graph = LayerGraph(prev + curr, list(inter) + intra)
    return graph, inter, intra, window, curr


def _simulate_propagation(inter, intra, window, vertices):
    """Step-by-step replay: inter averages, then one time slice at a time."""
    acc = {v: 0.0 for v in vertices}
    weight = {v: 0.0 for v in vertices}
    for edge, scale in inter.items():
        acc[edge.child] += edge.weight * scale
        weight[edge.child] += edge.weight
    for t in window.frames[1:]:
        for edge in intra:
            if edge.child[1] == t and weight[edge.parent] > 0:
                acc[edge.child] += edge.weight * acc[edge.parent] / weight[edge.parent]
                weight[edge.child] += edge.weight
    return {v: acc[v] / weight[v] if weight[v] > 0 else 1.0 for v in vertices}


def test_propagate_scales_matches_step_simulation_on_random_graphs():
    """
    Test 200 random graphs against an independent time-slice replay.
    """
    rng = np.random.default_rng(2024)
    for _ in range(200):
        graph, inter, intra, window, vertices = _random_propagation_graph(rng)
        assert len(vertices) <= 30
        table = propagate_scales(graph, inter, window)
        expected = _simulate_propagation(inter, intra, window, vertices)
        for vertex in vertices:
            assert abs(table.scale(vertex) - expected[vertex]) <= 1e-12 * max(
                1.0, abs(expected[vertex])
            )
