"""Replay store policies: ring FIFO exactness, reservoir statistics,
uniform sampling, snapshot refresh."""

import numpy as np
import pytest

from dualnets.engine import EngineError
from dualnets.memory import (
    MemoryEntry,
    ReservoirMemory,
    RingMemory,
    dump_memory,
    sample,
    snapshot_soft_labels,
    stored_float_budget,
)
from dualnets.model import DualNetModel


def entry(y, task=0, x=None, snap=None):
    return MemoryEntry(x=np.full((1, 2, 2), float(y)) if x is None else x, y=y,
                       soft_logits=snap, task_id=task)


def test_ring_fifo_eviction():
    ring = RingMemory(2)
    for y in (1, 2, 3):
        ring.insert(entry(y))
    assert sorted(e.y for e in ring.entries()) == [2, 3]


def test_ring_segments_are_per_task():
    ring = RingMemory(2)
    for t in (0, 1):
        for y in range(3):
            ring.insert(entry(10 * t + y, task=t))
    assert len(ring) == 4
    assert ring.tasks() == [0, 1]
    assert [e.y for e in ring.entries(tasks=[1])] == [11, 12]


def test_ring_rejects_missing_task_id():
    with pytest.raises(EngineError, match="task_id"):
        RingMemory(2).insert(entry(0, task=None))


def test_ring_capacity_never_exceeded():
    ring = RingMemory(5)
    for y in range(100):
        ring.insert(entry(y, task=y % 3))
    for t in ring.tasks():
        assert len(ring.segments[t]) <= 5
    assert len(ring) == 15


def test_reservoir_under_capacity_keeps_everything():
    res = ReservoirMemory(10)
    rng = np.random.default_rng(0)
    for y in range(7):
        res.insert(entry(y), rng)
    assert sorted(e.y for e in res.entries()) == list(range(7))


def test_reservoir_retention_matches_analytic_rate():
    """m=5, n=50: each item retained with frequency m/n over 10,000 trials."""
    m, n, trials = 5, 50, 10000
    rng = np.random.default_rng(1)
    counts = np.zeros(n)
    for _ in range(trials):
        res = ReservoirMemory(m)
        for y in range(n):
            res.insert(entry(y), rng)
        for e in res.entries():
            counts[e.y] += 1
    rate = counts / trials
    sigma = np.sqrt((m / n) * (1 - m / n) / trials)
    assert np.all(np.abs(rate - m / n) <= 3 * sigma + 1e-12)


def test_reservoir_size_is_min_of_seen_and_capacity():
    res = ReservoirMemory(3)
    rng = np.random.default_rng(2)
    for y in range(10):
        res.insert(entry(y), rng)
        assert len(res) == min(y + 1, 3)
    assert res.seen == 10


def test_sample_returns_all_when_underfull():
    ring = RingMemory(10)
    for y in range(3):
        ring.insert(entry(y))
    got = sample(ring, 10, np.random.default_rng(0))
    assert sorted(e.y for e in got) == [0, 1, 2]


def test_sample_without_replacement():
    ring = RingMemory(10)
    ring.insert(entry(0))
    ring.insert(entry(1))
    got = sample(ring, 2, np.random.default_rng(0))
    assert sorted(e.y for e in got) == [0, 1]


def test_sample_empty_memory_returns_empty_list():
    assert sample(RingMemory(5), 4, np.random.default_rng(0)) == []


def test_sample_uniformity_monte_carlo():
    """20,000 single draws over 10 entries: each picked 2,000 +- 3 sigma."""
    ring = RingMemory(10)
    for y in range(10):
        ring.insert(entry(y))
    rng = np.random.default_rng(3)
    counts = np.zeros(10)
    for _ in range(20000):
        counts[sample(ring, 1, rng)[0].y] += 1
    sigma = np.sqrt(20000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 2000) <= 3 * sigma)


def test_sample_restricted_to_past_tasks():
    ring = RingMemory(5)
    for t in (0, 1, 2):
        ring.insert(entry(t, task=t))
    got = sample(ring, 5, np.random.default_rng(0), tasks=[0, 1])
    assert sorted(e.task_id for e in got) == [0, 1]


def test_sample_deterministic_under_seed():
    ring = RingMemory(20)
    for y in range(20):
        ring.insert(entry(y))
    a = [e.y for e in sample(ring, 5, np.random.default_rng(42))]
    b = [e.y for e in sample(ring, 5, np.random.default_rng(42))]
    assert a == b


MODEL_KW = dict(in_shape=(3, 16, 16), channels=(6, 8, 12))


def test_snapshot_refresh_makes_kl_zero_and_tracks_weights():
    model = DualNetModel(task_aware=True, seed=0, **MODEL_KW)
    model.heads.ensure_task(0, (0, 1))
    ring = RingMemory(4)
    rng = np.random.default_rng(4)
    for y in (0, 1):
        ring.insert(entry(y, task=0, x=rng.uniform(size=(3, 16, 16))))
    snapshot_soft_labels(ring, model)
    seg = ring.segments[0]
    assert all(e.soft_logits is not None and len(e.soft_logits) == 2 for e in seg)
    x = np.stack([e.x for e in seg])
    assert np.allclose(model.predict(x, task_id=0), np.stack([e.soft_logits for e in seg]))
    # a weight change alters the refreshed snapshot
    before = [e.soft_logits.copy() for e in seg]
    model.heads._heads[0].b.data += 1.7
    snapshot_soft_labels(ring, model)
    assert not np.allclose(before[0], seg[0].soft_logits)


def test_snapshot_on_reservoir_warns_and_is_noop():
    res = ReservoirMemory(4)
    rng = np.random.default_rng(5)
    res.insert(entry(0, snap=np.array([0.5, -0.5])), rng)
    model = DualNetModel(task_aware=False, seed=0, **MODEL_KW)
    with pytest.warns(UserWarning, match="no-op"):
        snapshot_soft_labels(res, model)
    assert np.allclose(res.entries()[0].soft_logits, [0.5, -0.5])


def test_stored_float_budget_accounting():
    ring = RingMemory(3)
    for y in range(3):
        ring.insert(entry(y, snap=np.zeros(4)))
    per_entry = 1 * 2 * 2 + 4 + 2  # input + snapshot + label/task slots
    assert stored_float_budget(ring) == 3 * per_entry


def test_memory_dump_round_trip_fields(tmp_path):
    import json

    ring = RingMemory(3)
    ring.insert(entry(1, snap=np.array([1.0, 2.0])))
    ring.insert(entry(2))
    path = tmp_path / "mem.npz"
    dump_memory(ring, path)
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf8"))
        assert meta["count"] == 2
        assert meta["labels"] == [1, 2]
        assert meta["has_snapshot"] == [True, False]
        assert z["inputs"].shape == (2, 1, 2, 2)
        assert np.allclose(z["soft_0"], [1.0, 2.0])
