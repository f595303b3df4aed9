"""Metrics report and diagnostics writers.

This module formats evaluation metrics as a flat key-value text block and as a
single-line machine-readable record, and writes per-window diagnostics as CSV.
Follows Single Responsibility Principle (SRP) - handles only report formatting.
"""

import csv
from typing import Iterable, List, Optional

from src.metrics import SequenceMetrics
from src.models import DIAGNOSTICS_COLUMNS, RunSummary, WindowDiagnostics

# Field order of the single-line metrics record.
RECORD_FIELDS = (
    "sequence",
    "frames",
    "ate",
    "rpe_trans",
    "rpe_rot_deg",
    "abs_rel",
    "delta_125",
    "sq_rel",
    "rmse",
    "acc_mean",
    "acc_median",
    "comp_mean",
    "comp_median",
    "chamfer",
)


def _format_value(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


class MetricsReportBuilder:
    """Builds the key-value metrics report.

    Follows Builder Pattern for report construction.
    """

    def __init__(self):
        """Initialize report builder."""
        self.lines: List[str] = []

    def add_header(self, sequence: str):
        """Add the sequence name."""
        self.lines.append(f"sequence = {sequence}")
        return self

    def add_metrics(self, metrics: SequenceMetrics):
        """Add every available metric."""
        for key, value in metrics.to_dict().items():
            self.lines.append(f"{key} = {_format_value(value)}")
        return self

    def add_summary(self, summary: Optional[RunSummary]):
        """Add run summary fields (prefixed with run_)."""
        if summary is None:
            return self
        for key, value in summary.to_dict().items():
            self.lines.append(f"run_{key} = {_format_value(value)}")
        return self

    def build(self) -> str:
        """Build and return the report text."""
        return "\n".join(self.lines) + "\n"


def format_record(sequence: str, metrics: SequenceMetrics) -> str:
    """Comma-separated metrics in RECORD_FIELDS order (missing metrics as nan)."""
    values = dict(metrics.to_dict(), sequence=sequence)
    return ",".join(_format_value(values.get(name)) for name in RECORD_FIELDS)


def record_header() -> str:
    """Header line matching ``format_record``."""
    return ",".join(RECORD_FIELDS)


class DiagnosticsWriter:
    """Writes per-window diagnostics as CSV.

    Follows Single Responsibility Principle - handles only diagnostics output.
    """

    def __init__(self, path: str):
        self.path = path

    def write(self, diagnostics: Iterable[WindowDiagnostics]) -> int:
        """Write the header and one row per window; returns the row count."""
        rows = 0
        with open(self.path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(DIAGNOSTICS_COLUMNS)
            for item in diagnostics:
                writer.writerow(item.csv_row())
                rows += 1
        return rows
