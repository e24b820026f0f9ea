"""Data-parallel outer steps over task shards.

Workers only ever compute per-task gradients for their shard; nothing is
exchanged while inner loops run. The coordinator adds the per-task results
in one canonical order, so the summed gradient does not depend on the
worker count.
"""
from __future__ import annotations

import hashlib
import multiprocessing as mp
from typing import Callable, Mapping, Sequence

import numpy as np

from ..data import TaskDataset
from ..numcore import ParamSet

# filled in before forking so workers inherit the task data
_WORKER_TASKS: dict[str, TaskDataset] = {}

StepFn = Callable[[TaskDataset], "tuple[ParamSet, float]"]


def key_hash(key: str) -> bytes:
    return hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()


def canonical_order(keys: Sequence[str]) -> list[str]:
    """Batch order used for sharding and for the reduction."""
    return sorted(keys, key=lambda k: (key_hash(k), k))


def shard(keys: Sequence[str], workers: int) -> list[list[str]]:
    """Split keys (in hash order) into ``workers`` contiguous shards; some may be empty."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    ordered = canonical_order(keys)
    bounds = np.linspace(0, len(ordered), workers + 1).round().astype(int)
    return [ordered[bounds[i] : bounds[i + 1]] for i in range(workers)]


def _run_shard(args) -> list[tuple[str, np.ndarray, float]]:
    step_fn, keys = args
    out = []
    for key in keys:
        grads, loss = step_fn(_WORKER_TASKS[key])
        out.append((key, grads.flatten(), loss))
    return out


class ShardPool:
    """Persistent worker processes holding a read-only copy of the tasks."""

    def __init__(self, tasks: Mapping[str, TaskDataset], workers: int):
        self.workers = workers
        self.tasks = dict(tasks)
        self._pool = None
        if workers > 1:
            _WORKER_TASKS.clear()
            _WORKER_TASKS.update(self.tasks)
            self._pool = mp.get_context("fork").Pool(workers)

    def map_shards(self, step_fn: StepFn, shards: list[list[str]]):
        if self._pool is None:
            prev = dict(_WORKER_TASKS)
            _WORKER_TASKS.clear()
            _WORKER_TASKS.update(self.tasks)
            try:
                return [_run_shard((step_fn, s)) for s in shards]
            finally:
                _WORKER_TASKS.clear()
                _WORKER_TASKS.update(prev)
        return self._pool.map(_run_shard, [(step_fn, s) for s in shards])

    def close(self) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.terminate()
            self._pool.join()
            self._pool = None


def parallel_outer_step(
    task_batch: Sequence[TaskDataset] | Sequence[str],
    workers: int,
    step_fn: StepFn,
    shapes,
    pool: ShardPool | None = None,
) -> tuple[ParamSet, dict[str, float]]:
    """Per-task gradients for a batch, summed in canonical task order.

    ``shapes`` are the parameter (name, shape) pairs of the gradients. Without
    ``pool`` a temporary one is created for ``task_batch`` (which must then
    hold TaskDatasets). Returns (summed gradient, per-task loss).
    """
    if pool is None:
        tasks = {t.task_key: t for t in task_batch}
        with ShardPool(tasks, workers) as tmp:
            return parallel_outer_step(list(tasks), workers, step_fn, shapes, tmp)
    keys = [t if isinstance(t, str) else t.task_key for t in task_batch]
    results = {}
    for shard_out in pool.map_shards(step_fn, shard(keys, workers)):
        for key, flat, loss in shard_out:
            results[key] = (flat, loss)
    size = sum(int(np.prod(s)) for _, s in shapes)
    total = np.zeros(size)
    losses = {}
    for key in canonical_order(keys):
        flat, loss = results[key]
        total = total + flat
        losses[key] = loss
    return ParamSet.unflatten(total, shapes), losses
