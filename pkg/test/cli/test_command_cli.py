"""
Tests for src/cli.py subcommands and exit codes.
"""

import os
import sys

import pytest

from src.cli import build_parser, main
from src.pipeline import window_filename

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

SMALL_SCENE = [
    "--set",
    "frames=30",
    "--set",
    "height=12",
    "--set",
    "width=16",
    "--set",
    "window_len=10",
    "--set",
    "overlap=3",
]


@pytest.fixture
def generated(tmp_path):
    """Input directory filled by the gen subcommand."""
    input_dir = str(tmp_path / "predictions")
    assert main(["gen", "--input-dir", input_dir] + SMALL_SCENE) == 0
    return input_dir


def test_gen_writes_containers_and_ground_truth(generated):
    """
    Test gen writes one container per window plus ground-truth files.
    """
    names = sorted(os.listdir(generated))
    assert window_filename(1) in names
    assert window_filename(4) in names
    assert {"gt_trajectory.txt", "gt_depths.npz", "gt_points.ply"} <= set(names)


def test_gen_run_eval_round_trip(generated, tmp_path, capsys):
    """
    Test the full command chain succeeds and writes a metrics report.
    """
    output_dir = str(tmp_path / "output")
    assert main(["run", "--input-dir", generated, "--output-dir", output_dir]) == 0
    for name in ("trajectory.txt", "points.ply", "diagnostics.csv", "depths.npz"):
        assert os.path.exists(os.path.join(output_dir, name))
    with open(os.path.join(output_dir, "run_summary.txt"), encoding="utf-8") as handle:
        run_summary = handle.read()
    assert "run_peak_retained_windows = 2\n" in run_summary
    assert "run_window_ms_p_value = " in run_summary
    code = main(
        ["eval", "--output-dir", output_dir, "--gt-dir", generated, "--sequence", "demo"]
    )
    assert code == 0
    with open(os.path.join(output_dir, "metrics.txt"), encoding="utf-8") as handle:
        report = handle.read()
    assert report.startswith("sequence = demo\n")
    assert "ate = " in report and "abs_rel = " in report and "chamfer = " in report
    with open(os.path.join(output_dir, "metrics.record"), encoding="utf-8") as handle:
        header, record = handle.read().splitlines()
    assert header.startswith("sequence,frames,ate")
    assert record.startswith("demo,30,")
    assert "✅" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    """
    Test unknown flags exit with 1 and print the usage.
    """
    assert main(["run", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err
    assert "--bogus" in err


def test_missing_subcommand_is_usage_error(capsys):
    """
    Test a bare invocation exits with 1.
    """
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_help_exits_cleanly(capsys):
    """
    Test --help prints usage and exits 0.
    """
    assert main(["--help"]) == 0
    assert "run" in capsys.readouterr().out


def test_unknown_config_key_is_configuration_error(tmp_path, capsys):
    """
    Test an unknown --set key exits with 1.
    """
    assert main(["run", "--set", "not_a_key=1", "--input-dir", str(tmp_path)]) == 1
    assert "not_a_key" in capsys.readouterr().err


def test_invalid_log_level_is_configuration_error(monkeypatch, tmp_path):
    """
    Test LASER_LOG_LEVEL must name a logging level.
    """
    monkeypatch.setenv("LASER_LOG_LEVEL", "chatty")
    assert main(["run", "--input-dir", str(tmp_path)]) == 1


def test_missing_input_is_data_error(tmp_path, capsys):
    """
    Test running on an empty directory exits with 2.
    """
    code = main(["run", "--input-dir", str(tmp_path), "--output-dir", str(tmp_path / "o")])
    assert code == 2
    assert "Data error" in capsys.readouterr().err


def test_inspect_reports_headers_and_truncation(generated, capsys):
    """
    Test inspect prints header fields and exits 2 with the offset of a truncation.
    """
    path = os.path.join(generated, window_filename(2))
    assert main(["inspect", path]) == 0
    out = capsys.readouterr().out
    assert "window=2" in out and "start=8" in out and "frames=10" in out
    with open(path, "rb") as handle:
        data = handle.read()
    with open(path, "wb") as handle:
        handle.write(data[:5000])
    assert main(["inspect", path]) == 2
    assert "offset" in capsys.readouterr().err


def test_sweep_prints_one_record_per_value(tmp_path, capsys):
    """
    Test sweep runs the synthetic pipeline once per value.
    """
    code = main(
        ["sweep", "--key", "lsa_enabled", "--values", "true,false", "--output-dir", str(tmp_path)]
        + SMALL_SCENE
    )
    assert code == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if "," in line]
    assert lines[0].startswith("sequence,")
    assert lines[1].startswith("lsa_enabled=true,30,")
    assert lines[2].startswith("lsa_enabled=false,30,")


def test_sweep_rejects_unknown_key():
    """
    Test sweeping an unknown key exits with 1.
    """
    assert main(["sweep", "--key", "bogus", "--values", "1,2"]) == 1


def test_parser_collects_repeated_overrides():
    """
    Test --set is repeatable.
    """
    args = build_parser().parse_args(["run", "--set", "a=1", "--set", "b=2"])
    assert args.overrides == ["a=1", "b=2"]
    assert args.command == "run"
