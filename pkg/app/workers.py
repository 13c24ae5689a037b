import asyncio
import logging
import time
from typing import Awaitable, Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


class WorkerPool:
    """Bounded pool running blocking jobs on threads"""

    def __init__(self, max_workers: int = 1):
        if max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {max_workers}")
        self.max_workers = max_workers
        self.logger = logging.getLogger("disaster-synth.workers")
        self.completed = 0
        self.started_at = None

    async def _run_one(self, semaphore: asyncio.Semaphore, fn: Callable[[T], R], item: T, index: int) -> R:
        async with semaphore:
            self.logger.debug(f"Job {index} started ({self.max_workers} workers)")
            result = await asyncio.to_thread(fn, item)
            self.completed += 1
            return result

    async def run(self, items: Sequence[T], fn: Callable[[T], R]) -> List[R]:
        """
        Run fn over items with at most max_workers in flight.
        Results come back in input order regardless of completion order.
        """
        self.started_at = time.time()
        self.completed = 0
        semaphore = asyncio.Semaphore(self.max_workers)
        jobs: List[Awaitable[R]] = [
            self._run_one(semaphore, fn, item, index) for index, item in enumerate(items)
        ]
        results = await asyncio.gather(*jobs)
        elapsed = time.time() - self.started_at
        self.logger.info(f"Completed {self.completed} jobs in {elapsed:.2f} seconds")
        return list(results)
