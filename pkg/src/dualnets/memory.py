"""Bounded replay stores: per-task ring segments and reservoir sampling.

Entries hold the raw input, the hard label, an optional logit snapshot and an
optional task id. Ring memory (task-aware) keeps a FIFO segment per task;
reservoir memory (task-free) keeps every seen item alive with probability
capacity/seen. Snapshots are stored as raw logits; tempering happens in the
loss.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .engine import DTYPE, EngineError


@dataclass
class MemoryEntry:
    x: np.ndarray
    y: int
    soft_logits: np.ndarray | None = None
    task_id: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.y = int(self.y)
        if self.soft_logits is not None:
            self.soft_logits = np.asarray(self.soft_logits, dtype=DTYPE)

    def stored_floats(self) -> int:
        n = self.x.size
        if self.soft_logits is not None:
            n += self.soft_logits.size
        return n + 2  # label + task id slots


class RingMemory:
    """Fixed-capacity FIFO segment per task."""

    def __init__(self, per_task_capacity: int):
        if per_task_capacity < 0:
            raise EngineError("capacity must be nonnegative")
        self.per_task_capacity = per_task_capacity
        self.segments: dict[int, list[MemoryEntry]] = {}

    def __len__(self):
        return sum(len(s) for s in self.segments.values())

    def insert(self, entry: MemoryEntry, rng=None):
        if self.per_task_capacity == 0:
            return
        if entry.task_id is None:
            raise EngineError("ring memory requires entries with a task_id")
        seg = self.segments.setdefault(int(entry.task_id), [])
        seg.append(entry)
        if len(seg) > self.per_task_capacity:
            seg.pop(0)  # evict oldest within the task

    def entries(self, tasks=None):
        if tasks is None:
            tasks = sorted(self.segments)
        out = []
        for t in tasks:
            out.extend(self.segments.get(t, []))
        return out

    def tasks(self):
        return sorted(self.segments)


class ReservoirMemory:
    """Single buffer; item i of a stream of n survives with probability m/n."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise EngineError("capacity must be nonnegative")
        self.capacity = capacity
        self.items: list[MemoryEntry] = []
        self.seen = 0

    def __len__(self):
        return len(self.items)

    def insert(self, entry: MemoryEntry, rng: np.random.Generator):
        if self.capacity == 0:
            return
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append(entry)
            return
        slot = rng.integers(0, self.seen)
        if slot < self.capacity:
            self.items[int(slot)] = entry

    def entries(self, tasks=None):
        if tasks is None:
            return list(self.items)
        wanted = set(tasks)
        return [e for e in self.items if e.task_id in wanted]


def sample(memory, batch_size: int, rng: np.random.Generator, tasks=None):
    """Uniform draw without replacement; the whole pool when it is smaller.

    ``tasks`` restricts the pool to those task segments (task-aware replay
    from past tasks only). An empty pool yields an empty list so callers can
    skip replay terms during the first task.
    """
    pool = memory.entries(tasks)
    if not pool:
        return []
    if len(pool) <= batch_size:
        return list(pool)
    idx = rng.choice(len(pool), size=batch_size, replace=False)
    return [pool[int(i)] for i in idx]


def snapshot_soft_labels(memory, model, tau: float | None = None, batch_size: int = 256):
    """Overwrite soft logits of the newest ring task with eval-mode predictions.

    Task-aware end-of-task refresh: every entry of the most recent task gets
    the model's current logits under that task's head. ``tau`` is accepted
    for interface parity (tempering is applied by the loss, so raw logits are
    stored). On reservoir memories this is a no-op: snapshots were taken at
    insertion because no task boundary exists.
    """
    if tau is not None and tau <= 0:
        raise EngineError(f"temperature must be positive, got {tau}")
    if isinstance(memory, ReservoirMemory):
        warnings.warn("snapshot_soft_labels is a no-op on reservoir memory", stacklevel=2)
        return memory
    if not memory.segments:
        return memory
    task = max(memory.segments)
    snapshot_task(memory, model, task, batch_size=batch_size)
    return memory


def snapshot_task(memory, model, task_id: int, batch_size: int = 256):
    """Refresh soft logits for every entry of ``task_id`` (ring memory)."""
    seg = memory.segments.get(task_id, [])
    for start in range(0, len(seg), batch_size):
        chunk = seg[start : start + batch_size]
        x = np.stack([e.x for e in chunk])
        logits = model.predict(x, task_id=task_id if model.heads.task_aware else None)
        for e, row in zip(chunk, logits):
            e.soft_logits = row.copy()


def stored_float_budget(memory) -> int:
    return sum(e.stored_floats() for e in memory.entries())


def dump_memory(memory, path):
    """Run-forensics dump in the checkpoint container format (npz + JSON meta)."""
    entries = memory.entries()
    meta = {
        "kind": type(memory).__name__,
        "count": len(entries),
        "labels": [e.y for e in entries],
        "task_ids": [e.task_id for e in entries],
        "has_snapshot": [e.soft_logits is not None for e in entries],
    }
    arrays = {}
    if entries:
        arrays["inputs"] = np.stack([e.x for e in entries])
        for i, e in enumerate(entries):
            if e.soft_logits is not None:
                arrays[f"soft_{i}"] = e.soft_logits
    np.savez(
        path,
        __meta__=np.frombuffer(json.dumps(meta).encode("utf8"), dtype=np.uint8),
        **arrays,
    )
