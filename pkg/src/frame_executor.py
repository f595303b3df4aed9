"""Per-frame task executor module.

This module runs independent per-frame tasks (pseudo-depth extraction, segmentation,
nearest-neighbour queries) in parallel or sequential mode. Results always come back
in submission order so outputs do not depend on the worker count.
Follows Single Responsibility Principle (SRP) - handles only task execution logic.
"""

import logging
from concurrent.futures import ThreadPoolExecutor  # pylint: disable=E0611
from typing import Callable, List, Optional, Sequence, TypeVar

from src.config import RuntimeConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class FrameExecutor:
    """Maps a function over per-frame inputs.

    Supports both parallel (ThreadPoolExecutor) and sequential execution modes.
    Follows Strategy Pattern for execution strategies.
    """

    def __init__(self, max_workers: Optional[int] = None):
        """
        Initialize frame executor.

        Args:
            max_workers: Maximum number of parallel workers; defaults to LASER_THREADS
        """
        self.max_workers = max_workers if max_workers is not None else RuntimeConfig().threads
        if self.max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {self.max_workers}")

    def execute_sequential(self, func: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Run tasks one by one."""
        return [func(item) for item in items]

    def execute_parallel(self, func: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """
        Run tasks on a thread pool.

        Args:
            func: Task applied to every item
            items: Task inputs

        Returns:
            Results in the order of ``items``; the first task exception is re-raised
        """
        logger.debug("Running %d tasks on %d workers", len(items), self.max_workers)
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            return list(executor.map(func, items))

    def execute(self, func: Callable[[T], R], items: Sequence[T], parallel: bool = True) -> List[R]:
        """
        Run tasks in parallel or sequential mode.

        Sequential mode is used for a single worker, a single item, or when
        ``parallel`` is False.
        """
        items = list(items)
        if not parallel or self.max_workers <= 1 or len(items) <= 1:
            return self.execute_sequential(func, items)
        return self.execute_parallel(func, items)
