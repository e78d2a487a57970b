"""The fast/slow architecture.

A slow convolutional backbone extracts L feature maps h_1..h_L and owns an
SSL projector; a lightweight fast network produces per-pixel gating masks
m_l = g_l(h'_{l-1}) that modulate the slow features,

    h'_0 = x,   h'_l = D_l * h_l * m_l,

where D_l is an (optional) channel-constant dropout mask. The gated final
feature is average-pooled and classified by task heads (task-aware) or a
single shared head grown as classes appear (task-free).

Replay training uses hard labels plus stored logit snapshots:

    L = CE(incoming) + mean_mem[ CE(current, y) + lambda * KL_tau(snapshot -> current) ]

where KL_tau compares tempered softmaxes and its gradient reaches only the
current prediction. In task-free mode older snapshots cover a prefix of the
grown head (classes are appended in first-seen order), so snapshot terms are
evaluated on that prefix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .engine import (
    DTYPE,
    BatchNorm2d,
    Conv2d,
    Dense,
    EngineError,
    MaxPool2d,
    ParamSet,
    ReLU,
    Tensor,
    check_finite,
    cross_entropy,
    kl_divergence,
)
from .seeding import child_rng

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DropoutSpec:
    """Channel-wise dropout between the fast and slow features."""

    p: float
    mode: str = "train"

    def __post_init__(self):
        if not (0.0 <= self.p < 1.0):
            raise EngineError(f"dropout ratio must lie in [0, 1), got {self.p}")
        if self.mode not in ("train", "eval"):
            raise EngineError(f"dropout mode must be train|eval, got '{self.mode}'")


def spatial_dropout_mask(p, channels, width, height, rng, mode="train"):
    """Channel-constant inverted-dropout mask of shape (channels, height, width).

    Train mode drops each channel with probability ``p`` and scales survivors
    by ``1/(1-p)``; eval mode returns all-ones. ``p`` is the fraction dropped.
    """
    spec = DropoutSpec(p, mode)  # validates
    if spec.mode == "eval" or p == 0.0:
        return np.ones((channels, height, width), dtype=DTYPE)
    keep = (rng.random(channels) >= p).astype(DTYPE) / (1.0 - p)
    return np.broadcast_to(keep[:, None, None], (channels, height, width)).copy()


def _batch_dropout_masks(p, batch, channels, rng):
    """Per-sample channel keep masks, (batch, channels, 1, 1), inverted scaling."""
    keep = (rng.random((batch, channels)) >= p).astype(DTYPE) / (1.0 - p)
    return keep[:, :, None, None]


class SlowBlock:
    """conv3x3 -> [batchnorm] -> relu -> maxpool2, halving the spatial size."""

    def __init__(self, in_ch, out_ch, rng, batchnorm=True, bias=True):
        self.conv = Conv2d(in_ch, out_ch, kernel_size=3, rng=rng, bias=bias)
        self.bn = BatchNorm2d(out_ch) if batchnorm else None
        self.relu = ReLU()
        self.pool = MaxPool2d(2)

    def forward_cached(self, x, train):
        h, c1 = self.conv.forward_cached(x, train)
        c2 = None
        if self.bn is not None:
            h, c2 = self.bn.forward_cached(h, train)
        h, c3 = self.relu.forward_cached(h, train)
        h, c4 = self.pool.forward_cached(h, train)
        return h, (c1, c2, c3, c4)

    def backward(self, dh, cache):
        c1, c2, c3, c4 = cache
        dh = self.pool.backward(dh, c4)
        dh = self.relu.backward(dh, c3)
        if self.bn is not None:
            dh = self.bn.backward(dh, c2)
        return self.conv.backward(dh, c1)

    def named_params(self, prefix):
        out = [(f"{prefix}.conv.{n}", t) for n, t in self.conv.named_params()]
        if self.bn is not None:
            out += [(f"{prefix}.bn.{n}", t) for n, t in self.bn.named_params()]
        return out


class SlowNet:
    """Backbone (L blocks) plus the SSL projector."""

    def __init__(self, in_shape=(3, 32, 32), channels=(32, 64, 128), seed=0,
                 batchnorm=True, bias=True, projector_hidden=None, projector_out=None):
        c, h, w = in_shape
        if h % (2 ** len(channels)) or w % (2 ** len(channels)):
            raise EngineError(f"input {h}x{w} not divisible by pooling factor")
        self.in_shape = tuple(in_shape)
        self.channels = tuple(channels)
        self.blocks = []
        prev = c
        for i, ch in enumerate(channels):
            rng = child_rng(seed, "slow_block", i)
            self.blocks.append(SlowBlock(prev, ch, rng, batchnorm=batchnorm, bias=bias))
            prev = ch
        self.feature_dim = channels[-1]
        hid = projector_hidden or 2 * self.feature_dim
        out = projector_out or self.feature_dim
        self.proj1 = Dense(self.feature_dim, hid, rng=child_rng(seed, "proj", 0))
        self.proj_relu = ReLU()
        self.proj2 = Dense(hid, out, rng=child_rng(seed, "proj", 1))

    def feature_shapes(self):
        _, h, w = self.in_shape
        shapes = []
        for ch in self.channels:
            h, w = h // 2, w // 2
            shapes.append((ch, h, w))
        return shapes

    def features_cached(self, x, train):
        """All L intermediate feature maps plus the caches to backprop them."""
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise EngineError(f"expected input (batch, {self.in_shape}), got {x.shape}")
        check_finite(x, "backbone input")
        feats, caches = [], []
        h = x
        for block in self.blocks:
            h, cache = block.forward_cached(h, train)
            feats.append(h)
            caches.append(cache)
        return feats, caches

    def features(self, x, train=False):
        return self.features_cached(x, train)[0]

    def backward_features(self, dfeats, caches):
        """Chain the per-block backwards; ``dfeats[l]`` is the gradient
        arriving directly at h_l (gating contributions), summed with the
        gradient flowing down from block l+1."""
        dh = None
        for l in range(len(self.blocks) - 1, -1, -1):
            d = dfeats[l]
            if dh is not None:
                d = d + dh if d is not None else dh
            dh = self.blocks[l].backward(d, caches[l])
        return dh

    def embed_cached(self, x, train):
        """SSL path: backbone -> global average pool -> projector."""
        feats, caches = self.features_cached(x, train)
        hL = feats[-1]
        pooled = hL.mean(axis=(2, 3))
        z, c1 = self.proj1.forward_cached(pooled, train)
        z, c2 = self.proj_relu.forward_cached(z, train)
        z, c3 = self.proj2.forward_cached(z, train)
        return z, (caches, hL.shape, c1, c2, c3)

    def backward_embed(self, dz, cache):
        caches, hL_shape, c1, c2, c3 = cache
        d = self.proj2.backward(dz, c3)
        d = self.proj_relu.backward(d, c2)
        dpooled = self.proj1.backward(d, c1)
        _, _, h, w = hL_shape
        dhL = np.broadcast_to(dpooled[:, :, None, None], hL_shape) / (h * w)
        dfeats = [None] * (len(self.blocks) - 1) + [dhL]
        self.backward_features(dfeats, caches)

    def backbone_params(self) -> ParamSet:
        named = []
        for i, b in enumerate(self.blocks):
            named += b.named_params(f"slow.block{i}")
        return ParamSet(named)

    def projector_params(self) -> ParamSet:
        return ParamSet(
            [(f"slow.proj1.{n}", t) for n, t in self.proj1.named_params()]
            + [(f"slow.proj2.{n}", t) for n, t in self.proj2.named_params()]
        )

    def slow_params(self) -> ParamSet:
        return ParamSet(list(self.backbone_params()) + list(self.projector_params()))

    def buffers(self):
        out = {}
        for i, b in enumerate(self.blocks):
            if b.bn is not None:
                out[f"slow.block{i}.bn.running_mean"] = b.bn.running_mean
                out[f"slow.block{i}.bn.running_var"] = b.bn.running_var
        return out


class FastStage:
    """conv3x3 -> relu -> maxpool2 -> conv1x1 -> 2*sigmoid mask head."""

    def __init__(self, in_ch, mid_ch, out_ch, rng):
        self.reduce = Conv2d(in_ch, mid_ch, kernel_size=3, rng=rng)
        self.relu = ReLU()
        self.pool = MaxPool2d(2)
        self.expand = Conv2d(mid_ch, out_ch, kernel_size=1, padding=0, rng=rng)

    def forward_cached(self, x, train):
        h, c1 = self.reduce.forward_cached(x, train)
        h, c2 = self.relu.forward_cached(h, train)
        h, c3 = self.pool.forward_cached(h, train)
        z, c4 = self.expand.forward_cached(h, train)
        m = 2.0 / (1.0 + np.exp(-z))  # 2*sigmoid: bounded (0, 2), identity at 0
        return m, (c1, c2, c3, c4, m)

    def backward(self, dm, cache):
        c1, c2, c3, c4, m = cache
        dz = dm * (m * (2.0 - m) * 0.5)
        d = self.expand.backward(dz, c4)
        d = self.pool.backward(d, c3)
        d = self.relu.backward(d, c2)
        return self.reduce.backward(d, c1)

    def named_params(self, prefix):
        return [(f"{prefix}.reduce.{n}", t) for n, t in self.reduce.named_params()] + [
            (f"{prefix}.expand.{n}", t) for n, t in self.expand.named_params()
        ]


class FastNet:
    """L-stage gating network; stage l maps h'_{l-1} to a mask shaped like h_l."""

    def __init__(self, in_shape, channels, seed=0, mid_divisor=4):
        self.stages = []
        prev = in_shape[0]
        for i, ch in enumerate(channels):
            mid = max(ch // mid_divisor, 2)
            rng = child_rng(seed, "fast_stage", i)
            self.stages.append(FastStage(prev, mid, ch, rng))
            prev = ch

    def fast_params(self) -> ParamSet:
        named = []
        for i, s in enumerate(self.stages):
            named += s.named_params(f"fast.stage{i}")
        return ParamSet(named)


class ClassifierHeads:
    """Task-aware per-task heads, or one shared head grown as classes appear."""

    def __init__(self, feature_dim, task_aware, seed=0):
        self.feature_dim = feature_dim
        self.task_aware = task_aware
        self.seed = seed
        self._heads: dict[int, Dense] = {}
        self._task_classes: dict[int, tuple] = {}
        self._shared: Dense | None = None
        self._registry: list[int] = []  # task-free: class ids in first-seen order

    # -- task-aware ---------------------------------------------------------
    def ensure_task(self, task_id: int, classes):
        if not self.task_aware:
            raise EngineError("ensure_task is task-aware only")
        if task_id in self._heads:
            return
        rng = child_rng(self.seed, "head", task_id)
        self._heads[task_id] = Dense(self.feature_dim, len(classes), rng=rng)
        self._task_classes[task_id] = tuple(int(c) for c in classes)

    # -- task-free ----------------------------------------------------------
    def observe_classes(self, classes):
        if self.task_aware:
            raise EngineError("observe_classes is task-free only")
        new = [int(c) for c in dict.fromkeys(int(c) for c in classes) if int(c) not in self._registry]
        if not new and self._shared is not None:
            return
        self._registry.extend(new)
        n = len(self._registry)
        old = self._shared
        # fresh head keyed by its size; existing class columns are preserved
        head = Dense(self.feature_dim, n, rng=child_rng(self.seed, "head", "shared", n))
        if old is not None:
            head.W.data[:, : old.out_features] = old.W.data
            head.b.data[: old.out_features] = old.b.data
        self._shared = head

    # -- shared surface -----------------------------------------------------
    def n_classes(self, task_id=None) -> int:
        return self._head(task_id).out_features

    def known_tasks(self):
        return sorted(self._heads)

    @property
    def registry(self):
        return list(self._registry)

    def task_classes(self, task_id):
        return self._task_classes[task_id]

    def _head(self, task_id) -> Dense:
        if self.task_aware:
            if task_id is None:
                raise EngineError("task-aware prediction requires a task_id")
            if task_id not in self._heads:
                raise EngineError(f"unknown task_id {task_id}")
            return self._heads[task_id]
        if self._shared is None:
            raise EngineError("no classes observed yet")
        return self._shared

    def local_labels(self, y, task_id=None) -> np.ndarray:
        """Map global class ids to the selected head's logit indices."""
        y = np.asarray(y, dtype=int)
        if self.task_aware:
            lookup = {c: i for i, c in enumerate(self._task_classes[task_id])}
        else:
            lookup = {c: i for i, c in enumerate(self._registry)}
        try:
            return np.array([lookup[int(v)] for v in y], dtype=int)
        except KeyError as e:
            raise EngineError(f"label {e} not covered by the selected head") from None

    def logits_cached(self, pooled, task_id=None):
        head = self._head(task_id)
        return head.forward_cached(pooled, True)

    def backward(self, dlogits, cache, task_id=None):
        return self._head(task_id).backward(dlogits, cache)

    def head_params(self) -> ParamSet:
        named = []
        if self.task_aware:
            for t in sorted(self._heads):
                named += [(f"head.task{t}.{n}", p) for n, p in self._heads[t].named_params()]
        elif self._shared is not None:
            named += [(f"head.shared.{n}", p) for n, p in self._shared.named_params()]
        return ParamSet(named)


class _ClassifierCore:
    """Shared forward/loss plumbing for the dual model and plain baselines."""

    slow: SlowNet
    heads: ClassifierHeads

    def _pooled_forward(self, x, train, drop_p, rng):  # pragma: no cover - abstract
        raise NotImplementedError

    def _pooled_backward(self, dpooled, ctx):  # pragma: no cover - abstract
        raise NotImplementedError

    def predict(self, x, task_id=None) -> np.ndarray:
        """Eval-mode logits: no dropout, no augmentation, running statistics."""
        pooled, _ = self._pooled_forward(np.asarray(x, dtype=DTYPE), False, 0.0, None)
        logits, _ = self.heads.logits_cached(pooled, task_id)
        return logits

    def supervised_loss(
        self,
        x_in,
        y_in,
        mem_x=None,
        mem_y=None,
        mem_snapshots=None,
        mem_tasks=None,
        task_id=None,
        lambda_tr=2.0,
        tau=2.0,
        drop_p=0.0,
        rng=None,
        flavor="dualnet",
        derpp_alpha=0.1,
    ):
        """Replay loss with gradients accumulated into every trainable part.

        ``flavor`` selects the replay term: 'dualnet' (hard CE + tempered KL
        against stored snapshots), 'derpp' (hard CE + alpha * mean squared
        logit drift), 'er' (hard CE only), 'finetune' (no replay terms).
        Memory snapshots are required for the dualnet and derpp flavors.
        """
        if tau <= 0:
            raise EngineError(f"temperature must be positive, got {tau}")
        x_in = np.asarray(x_in, dtype=DTYPE)
        n_in = x_in.shape[0]
        have_mem = mem_x is not None and len(mem_x) > 0 and flavor != "finetune"
        if have_mem:
            mem_x = np.asarray(mem_x, dtype=DTYPE)
            mem_y = np.asarray(mem_y, dtype=int)
            mem_tasks = list(mem_tasks) if mem_tasks is not None else [None] * len(mem_y)
            if flavor in ("dualnet", "derpp"):
                if mem_snapshots is None or any(s is None for s in mem_snapshots):
                    raise EngineError("memory entry without a logit snapshot")
            X = np.concatenate([x_in, mem_x], axis=0)
        else:
            X = x_in
        pooled, ctx = self._pooled_forward(X, True, drop_p, rng)
        dpooled = np.zeros_like(pooled)

        logits_in, cache_in = self.heads.logits_cached(pooled[:n_in], task_id)
        ce_in, din = cross_entropy(logits_in, self.heads.local_labels(y_in, task_id))
        dpooled[:n_in] += self.heads.backward(din, cache_in, task_id)
        total = ce_in
        parts = {"ce_incoming": ce_in, "ce_memory": 0.0, "soft_replay": 0.0}

        if have_mem:
            m = len(mem_y)
            for tid, rows in self._memory_groups(mem_tasks):
                rows = np.asarray(rows)
                g_logits, g_cache = self.heads.logits_cached(pooled[n_in + rows], tid)
                w = len(rows) / m
                ce_g, dg = cross_entropy(g_logits, self.heads.local_labels(mem_y[rows], tid))
                dg = dg * w
                parts["ce_memory"] += ce_g * w
                if flavor in ("dualnet", "derpp"):
                    snaps = [mem_snapshots[r] for r in rows]
                    soft, dsoft = self._soft_replay_term(
                        g_logits, snaps, flavor, lambda_tr, tau, derpp_alpha
                    )
                    parts["soft_replay"] += soft * w
                    dg = dg + dsoft * w
                dpooled[n_in + rows] += self.heads.backward(dg, g_cache, tid)
            total += parts["ce_memory"] + parts["soft_replay"]

        self._pooled_backward(dpooled, ctx)
        return total, parts

    def _memory_groups(self, mem_tasks):
        if self.heads.task_aware:
            order = {}
            for i, t in enumerate(mem_tasks):
                order.setdefault(t, []).append(i)
            return [(t, order[t]) for t in sorted(order)]
        return [(None, list(range(len(mem_tasks))))]

    def _soft_replay_term(self, logits, snaps, flavor, lambda_tr, tau, alpha):
        """Snapshot term, averaged over the group's rows; grad w.r.t. logits.

        Snapshots may be shorter than the current logits (task-free growth);
        each is compared on its own class prefix.
        """
        m = len(snaps)
        dlogits = np.zeros_like(logits)
        value = 0.0
        by_len = {}
        for i, s in enumerate(snaps):
            by_len.setdefault(len(s), []).append(i)
        for length, rows in sorted(by_len.items()):
            if length > logits.shape[1]:
                raise EngineError("snapshot longer than the current head")
            cur = logits[np.asarray(rows), :length]
            ref = np.stack([snaps[i] for i in rows])
            if flavor == "dualnet":
                # KL(tempered snapshot || tempered current), grad into current
                val, grad = kl_divergence(cur, ref, tau)
                value += lambda_tr * val * len(rows) / m
                dlogits[np.asarray(rows), :length] += lambda_tr * grad * len(rows) / m
            else:  # derpp: mean squared logit drift
                diff = cur - ref
                value += alpha * float((diff**2).mean()) * len(rows) / m
                dlogits[np.asarray(rows), :length] += alpha * 2.0 * diff / diff.size * len(rows) / m
        return value, dlogits


class DualNetModel(_ClassifierCore):
    """Slow backbone + gating fast net + heads (the dual architecture)."""

    def __init__(self, in_shape=(3, 32, 32), channels=(32, 64, 128), task_aware=False,
                 seed=0, batchnorm=True, bias=True, max_fast_ratio=0.25):
        self.kind = "dualnet"
        self.in_shape = tuple(in_shape)
        self.channels = tuple(channels)
        self.task_aware = task_aware
        self.seed = seed
        self.batchnorm = batchnorm
        self.bias = bias
        self.slow = SlowNet(in_shape, channels, seed=seed, batchnorm=batchnorm, bias=bias)
        self.fast = FastNet(in_shape, channels, seed=seed)
        ratio = self.fast.fast_params().num_values() / self.slow.slow_params().num_values()
        if ratio > max_fast_ratio:
            raise EngineError(
                f"fast net has {ratio:.2f} of the slow net's parameters (> {max_fast_ratio})"
            )
        self.heads = ClassifierHeads(self.slow.feature_dim, task_aware, seed=seed)

    # -- spec op surfaces ----------------------------------------------------
    def slow_features(self, x):
        """Eval-mode feature maps h_1..h_L from the backbone."""
        return self.slow.features(np.asarray(x, dtype=DTYPE), train=False)

    def fast_adapt(self, x, features, drop: DropoutSpec, rng=None, masks=None):
        """Gated final feature h'_L for pre-computed slow features."""
        hL, _ = self._gated_forward(
            np.asarray(x, dtype=DTYPE), features, None, drop.mode == "train", drop.p, rng, masks
        )
        return hL

    # -- internals -----------------------------------------------------------
    def _gated_forward(self, x, feats, caches, train, drop_p, rng, masks=None):
        """h'_l = D_l * h_l * m_l; returns h'_L and the backward context."""
        if drop_p > 0.0 and train and masks is None and rng is None:
            raise EngineError("dropout requires an RNG stream in train mode")
        hprime = x
        fast_caches, gate_ins = [], []
        for l, stage in enumerate(self.fast.stages):
            m, fc = stage.forward_cached(hprime, train)
            if m.shape != feats[l].shape:
                raise EngineError(
                    f"gate shape {m.shape} != feature shape {feats[l].shape} at layer {l}"
                )
            if masks is not None:
                d = masks[l]
            elif train and drop_p > 0.0:
                d = _batch_dropout_masks(drop_p, m.shape[0], m.shape[1], rng)
            else:
                d = None
            gate_ins.append((m, d))
            hprime = feats[l] * m if d is None else d * feats[l] * m
            fast_caches.append(fc)
        ctx = (feats, caches, fast_caches, gate_ins)
        return hprime, ctx

    def _pooled_forward(self, x, train, drop_p, rng):
        feats, caches = self.slow.features_cached(x, train)
        hL, gctx = self._gated_forward(x, feats, caches, train, drop_p, rng)
        pooled = hL.mean(axis=(2, 3))
        return pooled, (gctx, hL.shape)

    def _pooled_backward(self, dpooled, ctx):
        (feats, caches, fast_caches, gate_ins), hL_shape = ctx
        _, _, h, w = hL_shape
        dhprime = np.broadcast_to(dpooled[:, :, None, None], hL_shape) / (h * w)
        dfeats = [None] * len(feats)
        for l in range(len(self.fast.stages) - 1, -1, -1):
            m, d = gate_ins[l]
            scaled = dhprime if d is None else dhprime * d
            dfeats[l] = scaled * m
            dm = scaled * feats[l]
            dhprime = self.fast.stages[l].backward(dm, fast_caches[l])
        self.slow.backward_features(dfeats, caches)

    # -- parameter views ------------------------------------------------------
    def slow_params(self) -> ParamSet:
        return self.slow.slow_params()

    def backbone_params(self) -> ParamSet:
        return self.slow.backbone_params()

    def fast_params(self) -> ParamSet:
        return self.fast.fast_params()

    def supervised_params(self) -> ParamSet:
        """Everything Eq.-style replay training updates: backbone + fast + heads
        (the projector stays SSL-only)."""
        return ParamSet(
            list(self.slow.backbone_params())
            + list(self.fast.fast_params())
            + list(self.heads.head_params())
        )

    def all_params(self) -> ParamSet:
        return ParamSet(
            list(self.slow.slow_params())
            + list(self.fast.fast_params())
            + list(self.heads.head_params())
        )


class BaselineModel(_ClassifierCore):
    """Slow backbone + heads only: the Finetune/ER/DER++ architecture."""

    def __init__(self, in_shape=(3, 32, 32), channels=(32, 64, 128), task_aware=False,
                 seed=0, batchnorm=True, bias=True):
        self.kind = "baseline"
        self.in_shape = tuple(in_shape)
        self.channels = tuple(channels)
        self.task_aware = task_aware
        self.seed = seed
        self.batchnorm = batchnorm
        self.bias = bias
        self.slow = SlowNet(in_shape, channels, seed=seed, batchnorm=batchnorm, bias=bias)
        self.heads = ClassifierHeads(self.slow.feature_dim, task_aware, seed=seed)

    def _pooled_forward(self, x, train, drop_p, rng):
        feats, caches = self.slow.features_cached(x, train)
        hL = feats[-1]
        return hL.mean(axis=(2, 3)), (caches, hL.shape, len(feats))

    def _pooled_backward(self, dpooled, ctx):
        caches, hL_shape, n_feats = ctx
        _, _, h, w = hL_shape
        dhL = np.broadcast_to(dpooled[:, :, None, None], hL_shape) / (h * w)
        self.slow.backward_features([None] * (n_feats - 1) + [dhL], caches)

    def supervised_params(self) -> ParamSet:
        return ParamSet(list(self.slow.backbone_params()) + list(self.heads.head_params()))

    def all_params(self) -> ParamSet:
        return ParamSet(list(self.slow.slow_params()) + list(self.heads.head_params()))


# -- checkpointing ------------------------------------------------------------


def _head_meta(heads: ClassifierHeads):
    if heads.task_aware:
        return {
            "task_aware": True,
            "tasks": {str(t): list(heads.task_classes(t)) for t in heads.known_tasks()},
        }
    return {"task_aware": False, "registry": heads.registry}


def save_checkpoint(model, path):
    """Versioned container: npz of named arrays + JSON architecture descriptor."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "in_shape": list(model.in_shape),
        "channels": list(model.channels),
        "batchnorm": model.batchnorm,
        "bias": model.bias,
        "seed": model.seed,
        "heads": _head_meta(model.heads),
    }
    arrays = {n: t.data for n, t in model.all_params()}
    arrays.update(model.slow.buffers())
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode("utf8"), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf8"))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise EngineError(f"unsupported checkpoint version {meta.get('version')}")
    cls = DualNetModel if meta["kind"] == "dualnet" else BaselineModel
    model = cls(
        in_shape=tuple(meta["in_shape"]),
        channels=tuple(meta["channels"]),
        task_aware=meta["heads"]["task_aware"],
        seed=meta["seed"],
        batchnorm=meta["batchnorm"],
        bias=meta["bias"],
    )
    if meta["heads"]["task_aware"]:
        for t, classes in sorted(meta["heads"]["tasks"].items(), key=lambda kv: int(kv[0])):
            model.heads.ensure_task(int(t), classes)
    elif meta["heads"]["registry"]:
        model.heads.observe_classes(meta["heads"]["registry"])
    for name, tensor in model.all_params():
        tensor.data[...] = arrays[name]
    for name, buf in model.slow.buffers().items():
        buf[...] = arrays[name]
    return model
