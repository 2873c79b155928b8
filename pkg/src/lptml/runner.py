"""Deterministic parallel execution of independent seeded tasks.

Each task is a grid cell (i, j) with a sampling rate and a seed derived
from the master seed and the cell coordinates alone, so every recorded
field except wall-clock timing is identical whatever the worker count
or scheduling order.  Workers share nothing mutable: the task context
is shipped once per worker at pool start and treated as read-only.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

ENV_WORKERS = "LPTML_WORKERS"


@dataclass(frozen=True)
class Task:
    i: int
    j: int
    p: float
    seed: int


@dataclass(frozen=True)
class TaskGrid:
    tasks: tuple[Task, ...]
    workers: int


@dataclass
class TaskOutcome:
    task: Task
    ok: bool
    value: Any = None
    error: str = ""


def derived_seed(master_seed: int, i: int, j: int) -> int:
    """Counter-style per-cell seed; independent of execution order."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(i, j))
    return int(ss.generate_state(1, np.uint64)[0])


def make_grid(cells: Iterable[tuple[int, int, float]], master_seed: int,
              workers: int = 1) -> TaskGrid:
    """Row-major task grid with derived per-cell seeds."""
    tasks = tuple(
        Task(i, j, float(p), derived_seed(master_seed, i, j))
        for i, j, p in sorted(cells, key=lambda c: (c[0], c[1]))
    )
    return TaskGrid(tasks, max(1, int(workers)))


def resolve_workers(flag: int | None = None, default: int = 1) -> int:
    """Worker count with precedence flag > environment > default."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{ENV_WORKERS} must be an integer, got {env!r}") from None
    return max(1, int(default))


_WORKER_FN: Callable[..., Any] | None = None
_WORKER_CONTEXT: Any = None


def _init_worker(fn: Callable[..., Any], context: Any) -> None:
    global _WORKER_FN, _WORKER_CONTEXT
    _WORKER_FN = fn
    _WORKER_CONTEXT = context


def _invoke(task: Task) -> tuple[bool, Any, str]:
    try:
        return True, _WORKER_FN(task, _WORKER_CONTEXT), ""
    except Exception as exc:  # noqa: BLE001 - per-task isolation is the contract
        return False, None, f"{type(exc).__name__}: {exc}"


class GridRunner:
    """Worker pool reused across several batches of tasks.

    task_fn(task, context) must be a module-level pure function of its
    arguments; context is shipped to each worker once.  With one worker
    everything runs inline in this process.
    """

    def __init__(self, workers: int, task_fn: Callable[..., Any], context: Any = None):
        self.workers = max(1, int(workers))
        self.task_fn = task_fn
        self.context = context
        self._pool: ProcessPoolExecutor | None = None

    def __enter__(self) -> "GridRunner":
        if self.workers > 1:
            # compile the numeric kernels before forking so children
            # inherit them instead of paying the JIT cost each
            from . import _kernels
            _kernels.warmup()
            methods = mp.get_all_start_methods()
            ctx = mp.get_context("fork" if "fork" in methods else None)
            self._pool = ProcessPoolExecutor(
                max_workers=self.workers, mp_context=ctx,
                initializer=_init_worker, initargs=(self.task_fn, self.context))
        return self

    def __exit__(self, *exc_info) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def run(self, tasks: Sequence[Task]) -> list[TaskOutcome]:
        """Outcomes in task order; per-task failures never abort siblings."""
        if self._pool is None:
            out = []
            for task in tasks:
                try:
                    out.append(TaskOutcome(task, True, self.task_fn(task, self.context)))
                except Exception as exc:  # noqa: BLE001
                    out.append(TaskOutcome(task, False, None,
                                           f"{type(exc).__name__}: {exc}"))
            return out
        futures = [self._pool.submit(_invoke, task) for task in tasks]
        out = []
        for task, fut in zip(tasks, futures):
            ok, value, err = fut.result()
            out.append(TaskOutcome(task, ok, value, err))
        return out


def run_grid(grid: TaskGrid, task_fn: Callable[..., Any],
             context: Any = None) -> list[TaskOutcome]:
    """One-shot execution of a whole grid, ordered by (i, j)."""
    with GridRunner(grid.workers, task_fn, context) as runner:
        return runner.run(grid.tasks)
