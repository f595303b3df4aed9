"""
Tests for src/pipeline.py streaming registration, correction and outputs.
"""

import os
import sys

import numpy as np
import pytest

from src.config import PipelineConfig
from src.container import write_window_predictions
from src.metrics import time_trend
from src.models import WindowSpec
from src.pipeline import (
    FileSource,
    GlobalMap,
    InputError,
    RetentionTracker,
    SyntheticSource,
    evaluate_against_scene,
    frame_depth,
    run_stream,
    window_filename,
    write_outputs,
)
from src.registration import SubmapRegistrar, to_world
from src.synthetic import emit_window, generate_scene
from src.windowing import schedule_windows
from test.helpers import assert_sim3_close, make_prediction

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))


@pytest.fixture
def scene(small_pipeline_config):
    """Scene described by the small pipeline config."""
    return generate_scene(small_pipeline_config.scene)


@pytest.fixture
def container_dir(small_pipeline_config, scene):
    """Directory holding every window of the small scene as a container file."""
    target = small_pipeline_config.output.input_dir
    os.makedirs(target)
    window = small_pipeline_config.window
    for spec in schedule_windows(scene.frame_count, window.window_len, window.overlap):
        write_window_predictions(
            emit_window(scene, spec), os.path.join(target, window_filename(spec.index))
        )
    return target


def test_noiseless_stream_recovers_every_registration(small_pipeline_config, scene):
    """
    Test each window's registration matches its recorded distortion.
    """
    result = run_stream(small_pipeline_config)
    assert [s.index for s in result.windows] == list(range(1, len(result.windows) + 1))
    for spec, transform in zip(result.windows, result.registrations):
        assert_sim3_close(transform, scene.true_registration(spec), 1e-4)
    assert result.summary.fallbacks == 0
    metrics = evaluate_against_scene(result, scene, small_pipeline_config)
    assert metrics.ate < 1e-4 * scene.diameter


def test_overlap_frames_are_emitted_once(small_pipeline_config, scene):
    """
    Test the global map holds each frame exactly once, in order.
    """
    result = run_stream(small_pipeline_config)
    assert result.global_map.frame_count == scene.frame_count
    assert result.global_map.trajectory.timestamps == [float(t) for t in range(1, 41)]
    assert result.summary.frames == scene.frame_count
    assert result.summary.points == result.global_map.points().shape[0]


def test_layer_correction_improves_depth_without_touching_trajectory(
    small_pipeline_config, scene
):
    """
    Test LSA lowers depth error while leaving every camera pose unchanged.
    """
    with_lsa = run_stream(small_pipeline_config)
    without = run_stream(small_pipeline_config.with_values(lsa_enabled=False))
    for (_, a), (_, b) in zip(with_lsa.global_map.trajectory, without.global_map.trajectory):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.translation, b.translation)
    corrected = evaluate_against_scene(with_lsa, scene, small_pipeline_config)
    raw = evaluate_against_scene(without, scene, small_pipeline_config)
    assert corrected.ate == pytest.approx(raw.ate)
    assert corrected.depth.abs_rel < raw.depth.abs_rel
    assert corrected.depth.abs_rel < 1e-3
    assert all(d.layers == 0 for d in without.diagnostics)
    assert all(d.inter_edges > 0 for d in with_lsa.diagnostics[1:])


def test_at_most_two_windows_are_retained(small_pipeline_config):
    """
    Test the consumer never keeps predictions of more than the previous and current window.
    """
    summary = run_stream(small_pipeline_config).summary
    assert summary.peak_retained_windows == 2
    # 10 frames of 12x16 pixels: float32 xyz, bool validity, float32 confidence
    window_bytes = 10 * 12 * 16 * (12 + 1 + 4)
    assert 2 * window_bytes <= summary.peak_retained_bytes <= 6 * window_bytes


def test_thousand_window_stream_keeps_two_windows_and_flat_timing(small_pipeline_config):
    """
    Test a 1000-window stream retains two windows and its per-window time has no trend.
    """
    long_run = small_pipeline_config.with_values(
        frames=2002, height=8, width=8, layers=2, window_len=4, overlap=2, lsa_enabled=False
    )
    result = run_stream(long_run)
    assert result.summary.windows == 1000
    assert result.summary.peak_retained_windows == 2
    assert len(result.window_ms) == 1000
    trend = time_trend(result.window_ms)
    assert trend.slope == pytest.approx(result.summary.window_ms_slope)
    # drift over the whole run stays well inside one typical window time
    assert abs(trend.slope) * len(result.window_ms) < 0.5 * np.median(result.window_ms)


def test_retention_is_measured_not_assumed(small_pipeline_config, monkeypatch):
    """
    Test predictions held past their window raise the measured peak.
    """
    held = []
    original = GlobalMap.append

    def hoarding_append(self, pred):
        held.append(pred)
        return original(self, pred)

    monkeypatch.setattr(GlobalMap, "append", hoarding_append)
    result = run_stream(small_pipeline_config)
    assert result.summary.peak_retained_windows == result.summary.windows
    assert result.summary.windows > 2


def test_results_do_not_depend_on_thread_count(small_pipeline_config, monkeypatch):
    """
    Test LASER_THREADS=1 and LASER_THREADS=4 write byte-identical trajectories and maps.
    """
    contents = {}
    for threads in ("1", "4"):
        monkeypatch.setenv("LASER_THREADS", threads)
        output_dir = os.path.join(small_pipeline_config.output.output_dir, f"threads{threads}")
        config = small_pipeline_config.with_values(output_dir=output_dir)
        write_outputs(run_stream(config), config)
        for name in ("trajectory.txt", "points.ply"):
            with open(os.path.join(output_dir, name), "rb") as handle:
                contents[(threads, name)] = handle.read()
    assert contents[("1", "trajectory.txt")] == contents[("4", "trajectory.txt")]
    assert contents[("1", "points.ply")] == contents[("4", "points.ply")]
    assert len(contents[("1", "trajectory.txt")]) > 0


def test_file_source_replays_containers(small_pipeline_config, container_dir):
    """
    Test containers on disk reproduce the synthetic run.
    """
    source = FileSource(container_dir)
    assert [s.to_dict() for s in source.windows()] == [
        s.to_dict() for s in schedule_windows(40, 10, 3)
    ]
    from_files = run_stream(small_pipeline_config, source)
    synthetic = run_stream(small_pipeline_config)
    for a, b in zip(from_files.registrations, synthetic.registrations):
        assert_sim3_close(a, b, 1e-6)


def test_corrupt_container_names_its_window(small_pipeline_config, container_dir):
    """
    Test a truncated container aborts the run with its window index.
    """
    path = os.path.join(container_dir, window_filename(2))
    with open(path, "rb") as handle:
        data = handle.read()
    with open(path, "wb") as handle:
        handle.write(data[: len(data) // 2])
    with pytest.raises(InputError) as excinfo:
        run_stream(small_pipeline_config, FileSource(container_dir))
    assert excinfo.value.window_index == 2


def test_missing_container_is_input_error(container_dir):
    """
    Test a gap in the window chain is reported before processing starts.
    """
    os.remove(os.path.join(container_dir, window_filename(3)))
    with pytest.raises(InputError) as excinfo:
        FileSource(container_dir).windows()
    assert excinfo.value.window_index == 3


def test_empty_or_missing_directory(tmp_path):
    """
    Test directories without containers are rejected.
    """
    with pytest.raises(InputError):
        FileSource(str(tmp_path)).windows()
    with pytest.raises(InputError):
        FileSource(str(tmp_path / "absent")).windows()


def test_synthetic_source_schedule(scene):
    """
    Test the synthetic source schedules the whole scene.
    """
    source = SyntheticSource(scene, 10, 3)
    specs = source.windows()
    assert specs[0].start == 1 and specs[-1].end == scene.frame_count
    assert source.load(specs[1]).window == specs[1]


def test_global_map_keeps_first_emission():
    """
    Test frames already emitted by an earlier window are skipped.
    """
    first = make_prediction(WindowSpec(1, 1, 4), seed=1)
    second = make_prediction(WindowSpec(2, 3, 4), seed=2)
    global_map = GlobalMap()
    assert global_map.append(first) == 4
    assert global_map.append(second) == 2
    assert global_map.frame_count == 6
    assert global_map.point_count == 6 * 12
    trajectory = global_map.trajectory
    assert np.array_equal(trajectory.poses[2].translation, first.frame(3).pose.translation)
    timestamps, depths = global_map.depths()
    assert timestamps.tolist() == [1, 2, 3, 4, 5, 6]
    assert depths.shape == (6, 3, 4)


def test_global_map_without_retained_points():
    """
    Test point counting still works when points are not kept.
    """
    global_map = GlobalMap(keep_points=False)
    global_map.append(make_prediction(WindowSpec(1, 1, 2)))
    assert global_map.point_count == 24
    assert global_map.points().shape == (0, 3)


def test_frame_depth_is_distance_along_view_axis():
    """
    Test depth of points in front of an identity-rotation camera.
    """
    frame = make_prediction(WindowSpec(1, 1, 1)).frame(1)
    camera_x = frame.pose.translation[0]
    expected = -(frame.pointmap.points[..., 2].astype(np.float64))
    depth = frame_depth(frame)
    assert np.allclose(depth, expected, atol=1e-5)
    assert camera_x == pytest.approx(0.1)


def test_retention_tracker_counts_live_windows():
    """
    Test the tracker counts windows with a live prediction and keeps the peak.
    """
    tracker = RetentionTracker()
    first = make_prediction(WindowSpec(1, 1, 4))
    second = make_prediction(WindowSpec(2, 3, 4))
    third = make_prediction(WindowSpec(3, 5, 4))
    tracker.track(first, second, second, third)
    assert tracker.checkpoint() == 3
    del first, second
    assert tracker.checkpoint() == 1
    assert tracker.peak_windows == 3
    assert tracker.peak_bytes == 3 * third.nbytes


def test_write_outputs_honours_toggles(small_pipeline_config):
    """
    Test enabled artifacts are written and disabled ones are not.
    """
    result = run_stream(small_pipeline_config)
    written = write_outputs(result, small_pipeline_config)
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["depths.npz", "diagnostics.csv", "points.ply", "trajectory.txt"]
    for path in written:
        assert os.path.getsize(path) > 0
    quiet = small_pipeline_config.with_values(
        output_dir=os.path.join(small_pipeline_config.output.output_dir, "quiet"),
        export_points=False,
        export_depths=False,
        export_diagnostics=False,
    )
    assert [os.path.basename(p) for p in write_outputs(result, quiet)] == ["trajectory.txt"]


@pytest.mark.parametrize("seed", range(20))
def test_noisy_stream_keeps_scale_and_lsa_ordering(small_pipeline_config, scene, seed):
    """
    Test noise of 0.5% of the scene diameter: scales within 1%, LSA still lowers depth error.
    """
    noisy = small_pipeline_config.with_values(seed=seed, noise_sigma=0.005 * scene.diameter)
    noisy_scene = generate_scene(noisy.scene)
    with_lsa = run_stream(noisy)
    without = run_stream(noisy.with_values(lsa_enabled=False))
    errors = [
        abs(t.scale / noisy_scene.true_registration(spec).scale - 1.0)
        for spec, t in zip(with_lsa.windows, with_lsa.registrations)
    ]
    assert np.mean(errors) < 0.01
    corrected = evaluate_against_scene(with_lsa, noisy_scene, noisy)
    raw = evaluate_against_scene(without, noisy_scene, noisy)
    assert corrected.ate == pytest.approx(raw.ate)
    assert corrected.depth.abs_rel < raw.depth.abs_rel


def test_registration_sees_uncorrected_previous_window(small_pipeline_config, scene, monkeypatch):
    """
    Test each window registers against the previous window before layer correction.
    """
    seen = []
    original = SubmapRegistrar.register

    def recording_register(self, prev_world, curr, overlap, previous=None):
        seen.append(prev_world)
        return original(self, prev_world, curr, overlap, previous)

    monkeypatch.setattr(SubmapRegistrar, "register", recording_register)
    result = run_stream(small_pipeline_config)
    assert seen[0] is None
    for k in range(1, len(result.windows)):
        expected = to_world(emit_window(scene, result.windows[k - 1]), result.registrations[k - 1])
        assert seen[k].window == result.windows[k - 1]
        for got, want in zip(seen[k].frames, expected.frames):
            assert np.array_equal(got.pointmap.points, want.pointmap.points)
            assert np.array_equal(got.pointmap.valid, want.pointmap.valid)


def test_default_scene_meets_accuracy_targets(tmp_path):
    """
    Test the default 200-frame scene and window settings recover trajectory and depth.
    """
    config = PipelineConfig().with_values(output_dir=str(tmp_path / "output"))
    scene = generate_scene(config.scene)
    metrics = evaluate_against_scene(run_stream(config), scene, config)
    assert metrics.ate < 1e-4 * scene.diameter
    assert metrics.depth.abs_rel < 1e-3


def test_overlap_threshold_sweep_keeps_depth_accuracy(small_pipeline_config, scene):
    """
    Test IoU thresholds from 0.2 to 0.6 all keep post-correction depth error below 1e-3.
    """
    errors = []
    for tau in (0.2, 0.3, 0.4, 0.5, 0.6):
        config = small_pipeline_config.with_values(iou_tau=tau)
        errors.append(evaluate_against_scene(run_stream(config), scene, config).depth.abs_rel)
    assert max(errors) < 1e-3


def test_longer_windows_trade_count_for_memory(small_pipeline_config):
    """
    Test longer windows give fewer windows and a larger measured peak footprint.
    """
    summaries = [
        run_stream(
            small_pipeline_config.with_values(frames=80, window_len=length, overlap=5)
        ).summary
        for length in (10, 20, 40)
    ]
    counts = [s.windows for s in summaries]
    footprints = [s.peak_retained_bytes for s in summaries]
    assert counts[0] > counts[1] > counts[2]
    assert footprints[0] < footprints[1] < footprints[2]
    assert all(s.peak_retained_windows == 2 for s in summaries)
