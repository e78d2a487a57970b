"""Task stream construction: class-incremental splits, semi-supervised label
masking, and the five desk-scale transfer-topology streams.

A stream is an ordered list of task specs plus protocol flags. Tasks are
materialized lazily into arrays; everything is a pure function of
(spec, seed), so a (kind, seed) pair maps to byte-identical manifests and
data.

Transfer streams over the source registry (first/last task sizes preserve
the benchmark's 10:1 and tiny-final ratios at desk scale):

  s-minus   {T1+, T2..T5, T1-}   big first task, small repeat at the end
  s-plus    {T1-, T2..T5, T1+}   small first task, big repeat at the end
  s-in      {T1,  T2..T5, T1'}   repeat with a fixed input-channel shift
  s-out     {T1,  T2..T5, T1''}  repeat with labels deranged
  s-pl      {T1..T5}             five mutually unrelated tasks
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import canonical_source_name, get_source
from .engine import EngineError
from .seeding import child_rng, child_seed

CTRL_KINDS = ("s-minus", "s-plus", "s-in", "s-out", "s-pl")

# desk-scale counts: (train, val) for the large, small and tiny task sizes
LARGE = (2000, 1000)
SMALL = (200, 100)
TINY = (50, 30)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    source: str
    classes: tuple  # global class ids = source class + class_offset
    train_count: int
    val_count: int
    seed: int
    label_fraction: float = 1.0
    label_permutation: tuple | None = None  # maps class position -> position
    channel_shift: tuple | None = None  # per-channel additive offset
    class_offset: int = 0  # keeps ids of different sources disjoint

    def __post_init__(self):
        if not (0.0 < self.label_fraction <= 1.0):
            raise EngineError(f"label fraction must lie in (0, 1], got {self.label_fraction}")
        if len(set(self.classes)) != len(self.classes):
            raise EngineError(f"duplicate classes in task '{self.name}'")

    def source_classes(self) -> tuple:
        return tuple(c - self.class_offset for c in self.classes)


@dataclass(frozen=True)
class TaskData:
    x_train: np.ndarray
    y_train: np.ndarray
    labeled: np.ndarray  # bool mask over the training samples
    x_val: np.ndarray
    y_val: np.ndarray


@dataclass(frozen=True)
class TaskStream:
    kind: str
    tasks: tuple
    protocol: str  # task_aware | task_free
    mode: str = "online"  # online (single pass) | batch (multi-epoch)
    seed: int = 0
    holdout_tasks: tuple = ()

    def __post_init__(self):
        if self.protocol not in ("task_aware", "task_free"):
            raise EngineError(f"protocol must be task_aware|task_free, got '{self.protocol}'")
        if self.mode not in ("online", "batch"):
            raise EngineError(f"mode must be online|batch, got '{self.mode}'")

    def __len__(self):
        return len(self.tasks)

    def classes_of(self, task_index: int) -> tuple:
        """Global class ids covered by the task (label permutations remap
        within this same set, so the head's class coverage is unchanged)."""
        return self.tasks[task_index].classes

    def all_classes(self) -> tuple:
        seen = list(dict.fromkeys(c for t in self.tasks for c in t.classes))
        return tuple(seen)

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "protocol": self.protocol,
            "mode": self.mode,
            "seed": self.seed,
            "tasks": [
                {
                    "name": t.name,
                    "source": canonical_source_name(t.source),
                    "classes": list(t.classes),
                    "train_count": t.train_count,
                    "val_count": t.val_count,
                    "label_fraction": t.label_fraction,
                    "label_permutation": list(t.label_permutation) if t.label_permutation else None,
                    "channel_shift": list(t.channel_shift) if t.channel_shift else None,
                    "class_offset": t.class_offset,
                    "seed": t.seed,
                }
                for t in self.tasks
            ],
            "holdout_tasks": [t.name for t in self.holdout_tasks],
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True)


def materialize(spec: TaskSpec, data_root=None) -> TaskData:
    """Draw the task's train/val arrays and apply its transforms."""
    source = get_source(spec.source, root=data_root)
    raw = spec.source_classes()
    x_tr, y_tr = source.draw("train", raw, spec.train_count, spec.seed)
    x_va, y_va = source.draw("val", raw, spec.val_count, spec.seed)
    x_tr, x_va = x_tr.copy(), x_va.copy()
    y_tr, y_va = y_tr.copy() + spec.class_offset, y_va.copy() + spec.class_offset
    if spec.channel_shift is not None:
        shift = np.asarray(spec.channel_shift, dtype=float)[None, :, None, None]
        x_tr = x_tr + shift
        x_va = x_va + shift
    if spec.label_permutation is not None:
        remap = {
            spec.classes[i]: spec.classes[p] for i, p in enumerate(spec.label_permutation)
        }
        y_tr = np.array([remap[int(v)] for v in y_tr])
        y_va = np.array([remap[int(v)] for v in y_va])
    labeled = np.ones(len(y_tr), dtype=bool)
    if spec.label_fraction < 1.0:
        keep = int(round(spec.label_fraction * len(y_tr)))
        rng = child_rng(spec.seed, "label_mask", spec.name)
        chosen = rng.choice(len(y_tr), size=keep, replace=False)
        labeled = np.zeros(len(y_tr), dtype=bool)
        labeled[chosen] = True
    return TaskData(x_tr, y_tr, labeled, x_va, y_va)


def split_stream(
    source: str,
    classes_per_task: int,
    n_tasks: int,
    seed: int,
    train_per_task: int = 250,
    val_per_task: int = 200,
    protocol: str = "task_free",
    mode: str = "online",
    holdout_tasks: int = 0,
    data_root=None,
) -> TaskStream:
    """Disjoint class subsets per task, order shuffled by seed.

    ``holdout_tasks`` reserves the last specs for hyper-parameter
    cross-validation; they are exposed on the stream but not trained.
    """
    src = get_source(source, root=data_root)
    total = classes_per_task * (n_tasks + holdout_tasks)
    if total > src.n_classes:
        raise EngineError(
            f"{total} classes needed but {source} provides {src.n_classes}"
        )
    order = child_rng(seed, "class_order").permutation(src.n_classes)[:total]
    specs = []
    for t in range(n_tasks + holdout_tasks):
        classes = tuple(int(c) for c in order[t * classes_per_task : (t + 1) * classes_per_task])
        specs.append(
            TaskSpec(
                name=f"task{t}",
                source=source,
                classes=classes,
                train_count=train_per_task,
                val_count=val_per_task,
                seed=child_seed(seed, "task", t),
            )
        )
    return TaskStream(
        kind=f"split-{canonical_source_name(source)}",
        tasks=tuple(specs[:n_tasks]),
        protocol=protocol,
        mode=mode,
        seed=seed,
        holdout_tasks=tuple(specs[n_tasks:]),
    )


def mask_labels(stream: TaskStream, rho: float, seed: int) -> TaskStream:
    """Per task, exactly round(rho * n) training samples keep their labels."""
    if not (0.0 < rho <= 1.0):
        raise EngineError(f"label fraction must lie in (0, 1], got {rho}")
    if rho == 1.0:
        return stream
    tasks = tuple(
        replace(t, label_fraction=rho, seed=child_seed(seed, "mask", t.name, t.seed))
        for t in stream.tasks
    )
    return replace(stream, tasks=tasks, seed=stream.seed)


def _derangement(n: int, rng: np.random.Generator) -> tuple:
    """A permutation with no fixed points (labels never map to themselves)."""
    if n < 2:
        raise EngineError("derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return tuple(int(p) for p in perm)


DEFAULT_CTRL_SOURCES = ("digits", "gratings", "letters", "rings", "tinted-digits")
INPUT_SHIFT = (0.5, 0.0, 0.0)


def ctrl_stream(
    kind: str,
    seed: int,
    sources=DEFAULT_CTRL_SOURCES,
    protocol: str = "task_aware",
    mode: str = "batch",
    n_classes: int = 10,
    data_root=None,
) -> TaskStream:
    """One of the five transfer-topology streams over the source registry."""
    if kind not in CTRL_KINDS:
        raise EngineError(f"unknown stream kind '{kind}' (choose from {CTRL_KINDS})")
    if len(sources) < 5:
        raise EngineError("transfer streams need a registry of >= 5 sources")
    sources = tuple(sources[:5])
    classes, offsets = {}, {}
    for pos, name in enumerate(sources):
        src = get_source(name, root=data_root)
        k = min(n_classes, src.n_classes)
        offsets[name] = pos * 100  # disjoint global ids per source
        classes[name] = tuple(offsets[name] + c for c in range(k))

    def task(i, name, counts, suffix="", **kw):
        return TaskSpec(
            name=f"T{i + 1}{suffix}",
            source=name,
            classes=classes[name],
            train_count=counts[0],
            val_count=counts[1],
            seed=child_seed(seed, kind, "task", i),
            class_offset=offsets[name],
            **kw,
        )

    middle = [task(i, sources[i], SMALL) for i in range(1, 4)]
    anchor = sources[0]
    if kind == "s-minus":
        tasks = [task(0, anchor, LARGE, "+")] + middle + [task(4, sources[4], SMALL),
                 task(5, anchor, SMALL, "-")]
    elif kind == "s-plus":
        tasks = [task(0, anchor, SMALL, "-")] + middle + [task(4, sources[4], SMALL),
                 task(5, anchor, LARGE, "+")]
    elif kind == "s-in":
        tasks = [task(0, anchor, LARGE)] + middle + [task(4, sources[4], SMALL),
                 task(5, anchor, TINY, "'", channel_shift=INPUT_SHIFT)]
    elif kind == "s-out":
        perm = _derangement(len(classes[anchor]), child_rng(seed, kind, "perm"))
        tasks = [task(0, anchor, LARGE)] + middle + [task(4, sources[4], SMALL),
                 task(5, anchor, SMALL, "''", label_permutation=perm)]
    else:  # s-pl: five mutually unrelated tasks, large final task
        tasks = [task(i, sources[i], SMALL) for i in range(4)] + [task(4, sources[4], LARGE)]
    return TaskStream(kind=kind, tasks=tuple(tasks), protocol=protocol, mode=mode, seed=seed)
