"""The interleaved fast/slow training loop and the baseline loops.

Per incoming batch (online: one pass; batch mode: several epochs):

  1. memory update (labeled samples only; task-free entries snapshot their
     logits at insertion since no boundary exists to refresh them),
  2. slow phase: n look-ahead rounds of the two-view decorrelation loss on
     incoming + freshly sampled memory inputs (dual methods only),
  3. fast phase: N replay updates of the supervised loss, each on a fresh
     memory sample, gradients into fast net, backbone and heads,
  4. at task boundaries (task-aware): refresh the finished task's logit
     snapshots, then evaluate on every task seen so far to fill the next
     accuracy-matrix row.

Baselines run the same protocol with the slow phase removed and their own
replay flavor: finetune (no replay), er (hard labels), derpp (hard labels +
squared logit drift).
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .engine import EngineError
from .memory import MemoryEntry, ReservoirMemory, RingMemory, sample, snapshot_task
from .metrics import AccuracyMatrix, all_metrics
from .model import BaselineModel, DualNetModel
from .optim import LookaheadConfig, lookahead_round, sgd_step
from .seeding import child_rng, child_seed
from .ssl import AugmentPolicy, barlow_loss_from_embeddings, make_views
from .streams import TaskStream, materialize

METHODS = ("dualnet", "dualnetpp", "er", "derpp", "finetune")
DUAL_METHODS = ("dualnet", "dualnetpp")


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters; ``None`` fields resolve from protocol/mode defaults."""

    method: str = "dualnet"
    seed: int = 0
    ssl_iters: int = 3                 # n: look-ahead rounds per incoming batch
    inner_updates: int | None = None   # N: 2 task-aware, 3 task-free
    lookahead_k: int | None = None     # K: inner steps per round (2; batch mode 1)
    slow_lr: float = 3e-4              # eps
    lookahead_beta: float | None = None  # beta (0.5; batch mode 1.0 = plain SGD)
    fast_lr: float | None = None       # 0.03 online, 0.003 batch
    lambda_bt: float = 2e-3
    lambda_tr: float = 2.0
    tau: float | None = None           # 2.0 task-aware, 10.0 task-free
    derpp_alpha: float = 0.1
    dropout_p: float | None = None     # dualnetpp: 0.1 online, 0.2 batch; else 0
    batch_size: int = 10
    replay_batch: int = 10
    memory_per_task: int = 50          # ring capacity (task-aware)
    memory_per_class: int = 100        # reservoir budget per class (task-free)
    epochs: int = 1                    # batch mode only; online is single-pass
    backbone_channels: tuple = (32, 64, 128)
    ssl_memory_all: bool = True        # SSL may sample every stored input

    def __post_init__(self):
        if self.method not in METHODS:
            raise EngineError(f"unknown method '{self.method}' (choose from {METHODS})")
        if self.ssl_iters < 0:
            raise EngineError("ssl_iters must be >= 0")
        if self.inner_updates is not None and self.inner_updates < 1:
            raise EngineError("inner_updates must be >= 1")

    def resolve(self, stream: TaskStream) -> "ResolvedConfig":
        aware = stream.protocol == "task_aware"
        online = stream.mode == "online"
        drop = self.dropout_p
        if drop is None:
            drop = (0.1 if online else 0.2) if self.method == "dualnetpp" else 0.0
        return ResolvedConfig(
            method=self.method,
            seed=self.seed,
            ssl_iters=self.ssl_iters,
            inner_updates=self.inner_updates or (2 if aware else 3),
            lookahead_k=self.lookahead_k or (2 if online else 1),
            slow_lr=self.slow_lr,
            lookahead_beta=self.lookahead_beta or (0.5 if online else 1.0),
            fast_lr=self.fast_lr or (0.03 if online else 0.003),
            lambda_bt=self.lambda_bt,
            lambda_tr=self.lambda_tr,
            tau=self.tau or (2.0 if aware else 10.0),
            derpp_alpha=self.derpp_alpha,
            dropout_p=drop,
            batch_size=self.batch_size,
            replay_batch=self.replay_batch,
            memory_per_task=self.memory_per_task,
            memory_per_class=self.memory_per_class,
            epochs=1 if online else self.epochs,
            backbone_channels=tuple(self.backbone_channels),
            ssl_memory_all=self.ssl_memory_all,
        )


@dataclass(frozen=True)
class ResolvedConfig:
    method: str
    seed: int
    ssl_iters: int
    inner_updates: int
    lookahead_k: int
    slow_lr: float
    lookahead_beta: float
    fast_lr: float
    lambda_bt: float
    lambda_tr: float
    tau: float
    derpp_alpha: float
    dropout_p: float
    batch_size: int
    replay_batch: int
    memory_per_task: int
    memory_per_class: int
    epochs: int
    backbone_channels: tuple
    ssl_memory_all: bool

    def lookahead(self) -> LookaheadConfig:
        return LookaheadConfig(k=self.lookahead_k, eps=self.slow_lr, beta=self.lookahead_beta)


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    metrics: dict
    per_task_seconds: list
    config: dict
    seed: int
    stream_manifest: dict
    dataset_digests: list
    model: object = field(repr=False, default=None)
    memory: object = field(repr=False, default=None)

    def manifest(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "stream": self.stream_manifest,
            "dataset_digests": self.dataset_digests,
            "per_task_seconds": self.per_task_seconds,
            "metrics": self.metrics,
        }


def build_model(cfg: ResolvedConfig, stream: TaskStream, in_shape=(3, 32, 32)):
    seed = child_seed(cfg.seed, "model")
    aware = stream.protocol == "task_aware"
    if cfg.method in DUAL_METHODS:
        return DualNetModel(in_shape=in_shape, channels=cfg.backbone_channels,
                            task_aware=aware, seed=seed)
    return BaselineModel(in_shape=in_shape, channels=cfg.backbone_channels,
                         task_aware=aware, seed=seed)


def build_memory(cfg: ResolvedConfig, stream: TaskStream):
    if cfg.method == "finetune":
        return RingMemory(0) if stream.protocol == "task_aware" else ReservoirMemory(0)
    if stream.protocol == "task_aware":
        return RingMemory(cfg.memory_per_task)
    return ReservoirMemory(cfg.memory_per_class * len(stream.all_classes()))


def ssl_phase(model, memory, incoming, n, lookahead_cfg, seed,
              policy: AugmentPolicy | None = None, lambda_bt: float = 2e-3,
              sample_rng=None):
    """n look-ahead rounds of the decorrelation loss on the slow learner.

    Each inner step draws a fresh memory mini-batch (matched to the incoming
    batch size), concatenates it with the incoming inputs, builds two views
    and backpropagates only into the slow parameters. Fast net and heads are
    untouched. ``n = 0`` skips the phase entirely.
    """
    if n == 0:
        return model
    policy = policy or AugmentPolicy()
    sample_rng = sample_rng if sample_rng is not None else child_rng(seed, "ssl_sample")
    view_rng = child_rng(seed, "ssl_views")
    slow = model.slow_params()

    def closure():
        drawn = sample(memory, len(incoming), sample_rng)
        batch = incoming
        if drawn:
            batch = np.concatenate([incoming, np.stack([e.x for e in drawn])])
        pair = make_views(batch, policy, int(view_rng.integers(2**31)))
        za, ca = model.slow.embed_cached(pair.view_a, True)
        zb, cb = model.slow.embed_cached(pair.view_b, True)
        loss, dza, dzb = barlow_loss_from_embeddings(za, zb, lambda_bt)
        model.slow.backward_embed(dza, ca)
        model.slow.backward_embed(dzb, cb)
        return loss

    for _ in range(n):
        lookahead_round(slow, closure, lookahead_cfg)
    return model


def supervised_phase(model, memory, batch, n_updates, cfg: ResolvedConfig, task_id,
                     past_tasks, aug_policy, aug_rng, mem_rng, drop_rng):
    """N replay updates on the labeled part of ``batch``; returns last loss.

    A fully unlabeled batch (semi-supervised streams) skips the phase: those
    samples reach only the slow learner. Each update draws a fresh memory
    sample and fresh augmentations.
    """
    xb, yb, labeled = batch
    if not labeled.any():
        return None
    x_lab, y_lab = xb[labeled], yb[labeled]
    flavor = {"dualnet": "dualnet", "dualnetpp": "dualnet"}.get(cfg.method, cfg.method)
    last = None
    for _ in range(n_updates):
        drawn = sample(memory, cfg.replay_batch, mem_rng, tasks=past_tasks)
        mem_x = mem_y = mem_snaps = mem_tasks = None
        if drawn and cfg.method != "finetune":
            mem_x = augment_batch(np.stack([e.x for e in drawn]), aug_policy, aug_rng)
            mem_y = np.array([e.y for e in drawn])
            mem_snaps = [e.soft_logits for e in drawn]
            mem_tasks = [e.task_id for e in drawn]
        x_aug = augment_batch(x_lab, aug_policy, aug_rng)
        loss, _ = model.supervised_loss(
            x_aug, y_lab, mem_x=mem_x, mem_y=mem_y, mem_snapshots=mem_snaps,
            mem_tasks=mem_tasks, task_id=task_id, lambda_tr=cfg.lambda_tr,
            tau=cfg.tau, drop_p=cfg.dropout_p, rng=drop_rng, flavor=flavor,
            derpp_alpha=cfg.derpp_alpha,
        )
        if not np.isfinite(loss):
            raise EngineError(f"non-finite supervised loss {loss}")
        sgd_step(model.supervised_params(), cfg.fast_lr)
        last = loss
    return last


def augment_batch(x, policy: AugmentPolicy, rng):
    from .ssl import augment

    return augment(x, policy, rng)


def _task_value_range(data) -> tuple:
    lo = min(0.0, float(data.x_train.min()))
    hi = max(1.0, float(data.x_train.max()))
    return (lo, hi)


def _digest(data) -> str:
    h = hashlib.sha256()
    for arr in (data.x_train, data.y_train, data.labeled, data.x_val, data.y_val):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def evaluate_row(model, stream, val_sets, upto, eval_batch=256):
    """Accuracies on tasks 0..upto with the model exactly as it stands."""
    row = []
    for j in range(upto + 1):
        x_val, y_val = val_sets[j]
        task_id = j if stream.protocol == "task_aware" else None
        correct = 0
        for s in range(0, len(x_val), eval_batch):
            xs = x_val[s : s + eval_batch]
            ys = y_val[s : s + eval_batch]
            logits = model.predict(xs, task_id=task_id)
            correct += int((logits.argmax(axis=1) == model.heads.local_labels(ys, task_id)).sum())
        row.append(correct / len(x_val))
    return row


def train_stream(config: TrainConfig, stream: TaskStream, memory=None, model=None,
                 data_root=None, in_shape=(3, 32, 32)) -> RunResult:
    """Run one method over one stream; fills the accuracy matrix row by row."""
    cfg = config.resolve(stream)
    model = model if model is not None else build_model(cfg, stream, in_shape)
    memory = memory if memory is not None else build_memory(cfg, stream)
    aware = stream.protocol == "task_aware"
    run_dual = cfg.method in DUAL_METHODS

    order_rng = child_rng(cfg.seed, "batch_order")
    mem_insert_rng = child_rng(cfg.seed, "memory_insert")
    mem_sample_rng = child_rng(cfg.seed, "memory_sample")
    ssl_sample_rng = child_rng(cfg.seed, "ssl_sample")
    ssl_seed_rng = child_rng(cfg.seed, "ssl_views")
    aug_rng = child_rng(cfg.seed, "augment")
    drop_rng = child_rng(cfg.seed, "dropout")

    rows, val_sets, digests, secs = [], [], [], []
    for t, spec in enumerate(stream.tasks):
        t0 = time.perf_counter()
        data = materialize(spec, data_root=data_root)
        val_sets.append((data.x_val, data.y_val))
        digests.append({"task": spec.name, "sha256_16": _digest(data)})
        vr = _task_value_range(data)
        sup_policy = replace(AugmentPolicy.crop_flip(), value_range=vr)
        ssl_policy = replace(AugmentPolicy(), value_range=vr)
        if aware:
            model.heads.ensure_task(t, stream.classes_of(t))
        past = list(range(t)) if aware else None
        n = len(data.x_train)
        for _ in range(cfg.epochs):
            idx = order_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                rows_idx = idx[start : start + cfg.batch_size]
                xb = data.x_train[rows_idx]
                yb = data.y_train[rows_idx]
                lb = data.labeled[rows_idx]
                batch_no = start // cfg.batch_size
                try:
                    _ingest_batch(model, memory, cfg, aware, t, xb, yb, lb, mem_insert_rng)
                    if run_dual and cfg.ssl_iters > 0:
                        _ssl_rounds(
                            model, memory, xb, cfg, ssl_policy, ssl_sample_rng, ssl_seed_rng
                        )
                    supervised_phase(
                        model, memory, (xb, yb, lb), cfg.inner_updates, cfg,
                        t if aware else None, past, sup_policy, aug_rng,
                        mem_sample_rng, drop_rng,
                    )
                except EngineError as e:
                    raise EngineError(
                        f"{e} (method={cfg.method}, task={t}, batch={batch_no})"
                    ) from e
        if aware and not isinstance(memory, ReservoirMemory):
            snapshot_task(memory, model, t)
        rows.append(evaluate_row(model, stream, val_sets, t))
        secs.append(time.perf_counter() - t0)

    matrix = AccuracyMatrix(rows)
    return RunResult(
        matrix=matrix,
        metrics=all_metrics(matrix),
        per_task_seconds=[round(s, 3) for s in secs],
        config=asdict(cfg),
        seed=cfg.seed,
        stream_manifest=stream.manifest(),
        dataset_digests=digests,
        model=model,
        memory=memory,
    )


def _ssl_rounds(model, memory, incoming, cfg, policy, sample_rng, seed_rng):
    """The slow phase with trainer-owned RNG streams (deterministic across
    methods that share a seed)."""
    slow = model.slow_params()
    la_cfg = cfg.lookahead()

    def closure():
        drawn = sample(memory, len(incoming), sample_rng)
        batch = incoming
        if drawn:
            batch = np.concatenate([incoming, np.stack([e.x for e in drawn])])
        pair = make_views(batch, policy, int(seed_rng.integers(2**31)))
        za, ca = model.slow.embed_cached(pair.view_a, True)
        zb, cb = model.slow.embed_cached(pair.view_b, True)
        loss, dza, dzb = barlow_loss_from_embeddings(za, zb, cfg.lambda_bt)
        model.slow.backward_embed(dza, ca)
        model.slow.backward_embed(dzb, cb)
        return loss

    for _ in range(cfg.ssl_iters):
        lookahead_round(slow, closure, la_cfg)


def _ingest_batch(model, memory, cfg, aware, task_id, xb, yb, lb, rng):
    """Memory update; task-free growth of the shared head + insert-time
    logit snapshots (no boundaries exist to refresh them later)."""
    if not lb.any():
        return
    x_lab, y_lab = xb[lb], yb[lb]
    if not aware:
        model.heads.observe_classes(y_lab)
    capacity = getattr(memory, "capacity", None)
    ring = isinstance(memory, RingMemory)
    if ring and memory.per_task_capacity == 0:
        return
    if capacity == 0:
        return
    snaps = [None] * len(y_lab)
    if not aware:
        logits = model.predict(x_lab)
        snaps = [row.copy() for row in logits]
    for i in range(len(y_lab)):
        memory.insert(
            MemoryEntry(x=x_lab[i], y=int(y_lab[i]), soft_logits=snaps[i],
                        task_id=task_id),
            rng,
        )
