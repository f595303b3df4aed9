"""Temporal window scheduling module.

Splits a frame stream into overlapping windows: a_1 = 1, a_{i+1} = a_i + L - O, with the
final window clamped so that it ends on the last frame.
Follows Single Responsibility Principle (SRP) - handles only window scheduling.
"""

from typing import Iterator, List, Optional

from src.config import ConfigurationError
from src.models import WindowSpec


def _validate(window_len: int, overlap: int):
    if window_len < 2:
        raise ConfigurationError(f"window_len must be >= 2, got {window_len}")
    if overlap >= window_len:
        raise ConfigurationError(
            f"overlap ({overlap}) must be smaller than window_len ({window_len})"
        )
    if overlap < 1:
        raise ConfigurationError(f"overlap must be >= 1, got {overlap}")


def schedule_windows(total_frames: int, window_len: int, overlap: int) -> List[WindowSpec]:
    """
    Schedule overlapping windows over a stream of known length.

    Args:
        total_frames: Number of frames T (>= 1)
        window_len: Window length L
        overlap: Frames O shared by consecutive windows (1 <= O < L)

    Returns:
        Ordered list of WindowSpec covering frames 1..T

    Raises:
        ConfigurationError: If T = 0 or the overlap leaves no stream progress

    Example:
        >>> [w.start for w in schedule_windows(11, 4, 2)]
        [1, 3, 5, 7, 8]
    """
    if total_frames < 1:
        raise ConfigurationError("Cannot schedule windows over an empty stream")
    scheduler = WindowScheduler(window_len, overlap)
    specs = [spec for _ in range(total_frames) for spec in scheduler.feed()]
    specs.extend(scheduler.finish())
    return specs


class WindowScheduler:
    """Lazy scheduler for streams of unknown length.

    Frames are fed one at a time; a window is emitted once it is complete. When the
    stream ends, ``finish`` emits the clamped tail window (if any). The emitted specs
    are identical to ``schedule_windows`` for the same total frame count.
    """

    def __init__(self, window_len: int, overlap: int):
        _validate(window_len, overlap)
        self.window_len = window_len
        self.overlap = overlap
        self.frames_seen = 0
        self._next_start = 1
        self._emitted: List[WindowSpec] = []

    @property
    def stride(self) -> int:
        """Start-to-start distance L - O."""
        return self.window_len - self.overlap

    def feed(self) -> Iterator[WindowSpec]:
        """Register one arriving frame; yields a window when one completes."""
        self.frames_seen += 1
        end = self._next_start + self.window_len - 1
        if end == self.frames_seen:
            spec = WindowSpec(len(self._emitted) + 1, self._next_start, self.window_len)
            self._emitted.append(spec)
            self._next_start += self.stride
            yield spec

    def finish(self) -> Iterator[WindowSpec]:
        """Close the stream; yields the clamped final window when frames remain uncovered."""
        total = self.frames_seen
        if total == 0:
            return
        last: Optional[WindowSpec] = self._emitted[-1] if self._emitted else None
        if last is not None and last.end >= total:
            return
        if total < self.window_len:
            spec = WindowSpec(1, 1, total)
        else:
            index = len(self._emitted) + 1
            spec = WindowSpec(index, total - self.window_len + 1, self.window_len)
        self._emitted.append(spec)
        yield spec
