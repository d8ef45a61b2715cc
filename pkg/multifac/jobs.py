"""Worker pool for independent tasks (starts, CV cells, replicates)."""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Generic, List, Optional, Sequence, TypeVar

import numpy as np
import sentry_sdk

from config import settings

from .exceptions import MultifacError

logger = logging.getLogger(__name__)

T = TypeVar("T")

# numerical failures of a single task; anything else is a bug and propagates
RECOVERABLE = (MultifacError, np.linalg.LinAlgError)

_worker_state = threading.local()


@dataclass
class Task(Generic[T]):
    """A unit of work for the pool."""

    fn: Callable[[], T]
    name: str = ""


@dataclass
class TaskOutcome(Generic[T]):
    """Result or failure of a single task."""

    name: str
    result: Optional[T] = None
    error: Optional[BaseException] = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class TaskRunner:
    """Runs tasks on a bounded thread pool and returns outcomes in order.

    Runners created inside a worker thread run their tasks serially so that
    nested fan-out (replicate -> CV cell -> start) never oversubscribes.
    """

    threads: int = field(default_factory=lambda: settings.threads)
    label: str = "tasks"

    def _execute(self, task: Task[T]) -> TaskOutcome[T]:
        started = time.perf_counter()
        nested = getattr(_worker_state, "active", False)
        _worker_state.active = True
        try:
            result = task.fn()
            return TaskOutcome(
                name=task.name,
                result=result,
                seconds=time.perf_counter() - started,
            )
        except RECOVERABLE as error:
            logger.error(f"❌ {self.label}: task {task.name} failed - {error}")
            sentry_sdk.capture_exception(error)
            return TaskOutcome(
                name=task.name,
                error=error,
                seconds=time.perf_counter() - started,
            )
        finally:
            _worker_state.active = nested

    def run(self, tasks: Sequence[Task[T]]) -> List[TaskOutcome[T]]:
        """Run every task; numerical failures are captured, not raised."""
        if not tasks:
            return []

        workers = max(1, min(self.threads, len(tasks)))
        if getattr(_worker_state, "active", False) or workers == 1:
            outcomes = [self._execute(task) for task in tasks]
        else:
            logger.info(f"🧵 {self.label}: {len(tasks)} tasks on {workers} threads")
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(self._execute, tasks))

        failed = sum(1 for outcome in outcomes if not outcome.ok)
        if failed:
            logger.warning(f"⚠️  {self.label}: {failed}/{len(tasks)} tasks failed")
        else:
            logger.debug(f"✅ {self.label}: {len(tasks)} tasks done")
        return outcomes

    def map(self, fn: Callable[[Any], T], items: Sequence[Any]) -> List[T]:
        """Apply ``fn`` to every item, re-raising the first failure."""
        outcomes = self.run(
            [Task(fn=_bind(fn, item), name=str(i)) for i, item in enumerate(items)]
        )
        for outcome in outcomes:
            if outcome.error is not None:
                raise outcome.error
        return [outcome.result for outcome in outcomes]  # type: ignore[misc]


def _bind(fn: Callable[[Any], T], item: Any) -> Callable[[], T]:
    return lambda: fn(item)
