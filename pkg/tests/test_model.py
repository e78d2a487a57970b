"""Dual architecture: gating, dropout, heads, replay loss, checkpoints."""

import numpy as np
import pytest

from dualnets.engine import EngineError, max_rel_error, numerical_gradient
from dualnets.model import (
    BaselineModel,
    DropoutSpec,
    DualNetModel,
    load_checkpoint,
    save_checkpoint,
    spatial_dropout_mask,
)

SMALL = dict(in_shape=(3, 16, 16), channels=(6, 8, 12))


def small_model(task_aware=False, seed=0, **kw):
    return DualNetModel(task_aware=task_aware, seed=seed, **SMALL, **kw)


def test_feature_shapes_halve_per_block():
    model = DualNetModel(in_shape=(3, 32, 32), channels=(8, 12, 16), seed=1)
    feats = model.slow_features(np.zeros((2, 3, 32, 32)))
    assert [f.shape[2] for f in feats] == [16, 8, 4]
    assert [f.shape[1] for f in feats] == [8, 12, 16]


def test_zero_input_through_bias_free_norm_free_blocks():
    model = small_model(batchnorm=False, bias=False)
    feats = model.slow_features(np.zeros((2, 3, 16, 16)))
    for f in feats:
        assert np.all(f == 0.0)


def test_slow_features_deterministic_in_eval():
    model = small_model()
    x = np.random.default_rng(0).uniform(size=(2, 3, 16, 16))
    a = model.slow_features(x)
    b = model.slow_features(x)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa, fb)


def test_slow_features_reject_wrong_shape():
    with pytest.raises(EngineError, match="expected input"):
        small_model().slow_features(np.zeros((2, 3, 8, 8)))


def test_fast_param_budget():
    model = DualNetModel(in_shape=(3, 32, 32), channels=(32, 64, 128), seed=0)
    ratio = model.fast_params().num_values() / model.slow_params().num_values()
    assert ratio <= 0.25


def test_zero_initialized_gates_give_identity_gating():
    """2*sigmoid(0) = 1 exactly, so zeroed fast weights pass h_L through."""
    model = small_model()
    for _, t in model.fast_params():
        t.data[...] = 0.0
    x = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
    feats = model.slow_features(x)
    out = model.fast_adapt(x, feats, DropoutSpec(0.0, "eval"))
    assert np.allclose(out, feats[-1])


def test_p_zero_path_bit_identical_to_plain_gating():
    model = small_model()
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(3, 3, 16, 16))
    feats = model.slow_features(x)
    plain = model.fast_adapt(x, feats, DropoutSpec(0.0, "train"), np.random.default_rng(5))
    dropped = model.fast_adapt(x, feats, DropoutSpec(0.0, "train"), np.random.default_rng(99))
    assert np.array_equal(plain, dropped)


def test_dropout_mask_properties():
    rng = np.random.default_rng(3)
    assert np.all(spatial_dropout_mask(0.0, 4, 5, 6, rng) == 1.0)
    assert np.all(spatial_dropout_mask(0.5, 4, 5, 6, rng, mode="eval") == 1.0)
    m = spatial_dropout_mask(0.5, 8, 3, 4, rng)
    assert m.shape == (8, 4, 3)
    for c in range(8):
        assert np.unique(m[c]).size == 1  # constant within each channel
        assert m[c, 0, 0] in (0.0, 2.0)  # dropped or inverted-scaled


def test_dropout_mask_rejects_bad_ratio():
    rng = np.random.default_rng(0)
    for p in (-0.1, 1.0, 1.5):
        with pytest.raises(EngineError):
            spatial_dropout_mask(p, 2, 2, 2, rng)


def test_dropout_drop_fraction_monte_carlo():
    """10,000 channel draws at p=0.2: drop fraction within 3 sigma binomial."""
    rng = np.random.default_rng(4)
    draws = np.concatenate(
        [spatial_dropout_mask(0.2, 10, 1, 1, rng).ravel() for _ in range(1000)]
    )
    frac = float((draws == 0.0).mean())
    assert abs(frac - 0.2) <= 0.012


def test_dropout_inverted_scaling_keeps_unit_mean():
    rng = np.random.default_rng(5)
    draws = np.concatenate(
        [spatial_dropout_mask(0.3, 10, 1, 1, rng).ravel() for _ in range(1000)]
    )
    sigma = np.sqrt(0.3 / 0.7 / draws.size)
    assert abs(draws.mean() - 1.0) <= 3 * sigma


def test_predict_task_aware_head_selection():
    model = small_model(task_aware=True)
    model.heads.ensure_task(0, (3, 7, 9, 1, 4))
    model.heads.ensure_task(1, (2, 5))
    x = np.random.default_rng(6).uniform(size=(2, 3, 16, 16))
    assert model.predict(x, task_id=0).shape == (2, 5)
    assert model.predict(x, task_id=1).shape == (2, 2)
    with pytest.raises(EngineError, match="unknown task_id"):
        model.predict(x, task_id=3)
    with pytest.raises(EngineError, match="requires a task_id"):
        model.predict(x)


def test_task_free_head_grows_with_classes():
    model = small_model(task_aware=False)
    model.heads.observe_classes([4, 2])
    x = np.random.default_rng(7).uniform(size=(2, 3, 16, 16))
    assert model.predict(x).shape == (2, 2)
    before = model.predict(x)
    model.heads.observe_classes([9, 0])
    after = model.predict(x)
    assert after.shape == (2, 4)
    assert np.allclose(after[:, :2], before)  # old class logits preserved
    assert model.heads.registry == [4, 2, 9, 0]


def test_eval_predict_is_deterministic():
    model = small_model()
    model.heads.observe_classes([0, 1])
    x = np.random.default_rng(8).uniform(size=(4, 3, 16, 16))
    assert np.array_equal(model.predict(x), model.predict(x))


def test_supervised_loss_hand_composition():
    """ln2 + ln2 + 2*0.1308 with uniform current logits and snapshot [ln3, 0]."""
    model = small_model()
    model.heads.observe_classes([0, 1])
    # force every logit to zero: zero head weights
    for _, t in model.heads.head_params():
        t.data[...] = 0.0
    rng = np.random.default_rng(9)
    x_in = rng.uniform(size=(1, 3, 16, 16))
    mem_x = rng.uniform(size=(1, 3, 16, 16))
    snapshot = np.array([np.log(3.0), 0.0])
    total, parts = model.supervised_loss(
        x_in,
        np.array([0]),
        mem_x=mem_x,
        mem_y=np.array([1]),
        mem_snapshots=[snapshot],
        mem_tasks=[None],
        lambda_tr=2.0,
        tau=1.0,
        flavor="dualnet",
    )
    expected_kl = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
    assert abs(parts["ce_incoming"] - np.log(2)) < 1e-12
    assert abs(parts["ce_memory"] - np.log(2)) < 1e-12
    assert abs(parts["soft_replay"] - 2 * expected_kl) < 1e-12
    assert abs(total - 1.648) < 1e-3


def test_supervised_loss_lambda_zero_reduces_to_er():
    model = small_model()
    model.heads.observe_classes([0, 1, 2])
    rng = np.random.default_rng(10)
    x_in = rng.uniform(size=(2, 3, 16, 16))
    mem_x = rng.uniform(size=(3, 3, 16, 16))
    mem_y = np.array([0, 2, 1])
    snaps = [rng.normal(size=3) for _ in range(3)]
    args = dict(mem_x=mem_x, mem_y=mem_y, mem_tasks=[None] * 3, tau=2.0)
    dual, dual_parts = model.supervised_loss(
        x_in, np.array([1, 0]), mem_snapshots=snaps, lambda_tr=0.0, flavor="dualnet", **args
    )
    er, er_parts = model.supervised_loss(
        x_in, np.array([1, 0]), mem_snapshots=None, flavor="er", **args
    )
    assert abs(dual - er) < 1e-12
    assert dual_parts["soft_replay"] == 0.0
    assert abs(dual_parts["ce_memory"] - er_parts["ce_memory"]) < 1e-12


def test_supervised_loss_zero_kl_when_prediction_matches_snapshot():
    model = small_model()
    model.heads.observe_classes([0, 1])
    rng = np.random.default_rng(11)
    mem_x = rng.uniform(size=(2, 3, 16, 16))
    # snapshot exactly the current train-mode prediction on the memory batch
    x_in = rng.uniform(size=(1, 3, 16, 16))
    X = np.concatenate([x_in, mem_x])
    pooled, _ = model._pooled_forward(X, True, 0.0, None)
    logits, _ = model.heads.logits_cached(pooled[1:], None)
    model.all_params().zero_grads()
    total, parts = model.supervised_loss(
        x_in,
        np.array([0]),
        mem_x=mem_x,
        mem_y=np.array([0, 1]),
        mem_snapshots=[logits[0].copy(), logits[1].copy()],
        mem_tasks=[None, None],
        lambda_tr=2.0,
        tau=2.0,
    )
    assert parts["soft_replay"] < 1e-24


def test_supervised_loss_requires_snapshots():
    model = small_model()
    model.heads.observe_classes([0, 1])
    rng = np.random.default_rng(12)
    with pytest.raises(EngineError, match="snapshot"):
        model.supervised_loss(
            rng.uniform(size=(1, 3, 16, 16)),
            np.array([0]),
            mem_x=rng.uniform(size=(1, 3, 16, 16)),
            mem_y=np.array([1]),
            mem_snapshots=[None],
            mem_tasks=[None],
        )


def _loss_closure(model, x_in, y_in, mem_x, mem_y, snaps, masks):
    feats, caches = model.slow.features_cached(np.concatenate([x_in, mem_x]), True)
    hL, _ = model._gated_forward(np.concatenate([x_in, mem_x]), feats, caches, True, 0.5, None, masks)
    pooled = hL.mean(axis=(2, 3))
    from dualnets.engine import cross_entropy, kl_divergence

    logits_in, _ = model.heads.logits_cached(pooled[: len(x_in)], None)
    logits_mem, _ = model.heads.logits_cached(pooled[len(x_in) :], None)
    ce_in, _ = cross_entropy(logits_in, model.heads.local_labels(y_in))
    ce_mem, _ = cross_entropy(logits_mem, model.heads.local_labels(mem_y))
    kl, _ = kl_divergence(logits_mem, np.stack(snaps), 2.0)
    return ce_in + ce_mem + 2.0 * kl


@pytest.mark.parametrize("seed", range(3))
def test_gated_supervised_gradients_match_finite_differences(seed):
    """FD oracle over theta, phi and heads through the full gated composite
    loss (incoming CE + memory CE + tempered KL), with fixed dropout masks."""
    rng = np.random.default_rng(100 + seed)
    model = DualNetModel(in_shape=(3, 8, 8), channels=(4, 6, 8), seed=seed, max_fast_ratio=0.5)
    model.heads.observe_classes([0, 1])
    x_in = rng.uniform(size=(2, 3, 8, 8))
    mem_x = rng.uniform(size=(2, 3, 8, 8))
    y_in = np.array([0, 1])
    mem_y = np.array([1, 0])
    snaps = [rng.normal(size=2), rng.normal(size=2)]
    masks = [_fixed_mask(rng, 0.5, 4, ch) for ch, _, _ in model.slow.feature_shapes()]

    model.all_params().zero_grads()
    _composite_with_masks(model, x_in, y_in, mem_x, mem_y, snaps, masks)
    analytic = {n: t.grad.copy() for n, t in model.supervised_params()}

    def f():
        return _loss_closure(model, x_in, y_in, mem_x, mem_y, snaps, masks)

    worst = 0.0
    for name, t in model.supervised_params():
        worst = max(worst, max_rel_error(analytic[name], numerical_gradient(f, t.data)))
    assert worst < 1e-4


def _fixed_mask(rng, p, batch, channels):
    keep = (rng.random((batch, channels)) >= p).astype(float)
    keep[:, 0] = 1.0  # keep at least one channel alive per sample
    return keep[:, :, None, None] / (1.0 - p)


def _composite_with_masks(model, x_in, y_in, mem_x, mem_y, snaps, masks):
    """Analytic gradients of the composite loss with explicit dropout masks."""
    from dualnets.engine import cross_entropy, kl_divergence

    X = np.concatenate([x_in, mem_x])
    feats, caches = model.slow.features_cached(X, True)
    hL, ctx = model._gated_forward(X, feats, caches, True, 0.5, None, masks)
    pooled = hL.mean(axis=(2, 3))
    n_in = len(x_in)
    logits_in, cin = model.heads.logits_cached(pooled[:n_in], None)
    logits_mem, cmem = model.heads.logits_cached(pooled[n_in:], None)
    ce_in, din = cross_entropy(logits_in, model.heads.local_labels(y_in))
    ce_mem, dmem = cross_entropy(logits_mem, model.heads.local_labels(mem_y))
    kl, dkl = kl_divergence(logits_mem, np.stack(snaps), 2.0)
    dpooled = np.zeros_like(pooled)
    dpooled[:n_in] = model.heads.backward(din, cin)
    dpooled[n_in:] = model.heads.backward(dmem + 2.0 * dkl, cmem)
    model._pooled_backward(dpooled, (ctx, hL.shape))
    return ce_in + ce_mem + 2.0 * kl


def test_supervised_gradient_reaches_slow_learner():
    model = small_model()
    model.heads.observe_classes([0, 1])
    rng = np.random.default_rng(13)
    model.supervised_loss(
        rng.uniform(size=(2, 3, 16, 16)), np.array([0, 1]), flavor="finetune"
    )
    grads = model.backbone_params()
    assert grads.grads_populated()
    assert any(np.abs(t.grad).max() > 0 for _, t in grads)


def test_derpp_flavor_penalizes_logit_drift():
    model = small_model()
    model.heads.observe_classes([0, 1])
    rng = np.random.default_rng(14)
    x_in = rng.uniform(size=(1, 3, 16, 16))
    mem_x = rng.uniform(size=(1, 3, 16, 16))
    _, parts_far = model.supervised_loss(
        x_in, np.array([0]), mem_x=mem_x, mem_y=np.array([1]),
        mem_snapshots=[np.array([100.0, -100.0])], mem_tasks=[None],
        flavor="derpp", derpp_alpha=0.1,
    )
    model.all_params().zero_grads()
    cur = model.predict(mem_x)  # eval != train logits, but drift dominates
    _, parts_near = model.supervised_loss(
        x_in, np.array([0]), mem_x=mem_x, mem_y=np.array([1]),
        mem_snapshots=[cur[0]], mem_tasks=[None],
        flavor="derpp", derpp_alpha=0.1,
    )
    assert parts_far["soft_replay"] > parts_near["soft_replay"]


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = small_model(task_aware=True, seed=3)
    model.heads.ensure_task(0, (1, 5))
    model.heads.ensure_task(2, (0, 3, 7))
    # move running stats off their init values
    model.slow.features_cached(np.random.default_rng(15).uniform(size=(4, 3, 16, 16)), True)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path)
    clone = load_checkpoint(path)
    for (n1, t1), (n2, t2) in zip(model.all_params(), clone.all_params()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    for name, buf in model.slow.buffers().items():
        assert np.array_equal(buf, clone.slow.buffers()[name])
    x = np.random.default_rng(16).uniform(size=(2, 3, 16, 16))
    assert np.array_equal(model.predict(x, task_id=2), clone.predict(x, task_id=2))


def test_checkpoint_round_trip_task_free(tmp_path):
    model = BaselineModel(task_aware=False, seed=4, **SMALL)
    model.heads.observe_classes([3, 1, 4])
    path = tmp_path / "baseline.npz"
    save_checkpoint(model, path)
    clone = load_checkpoint(path)
    assert clone.heads.registry == [3, 1, 4]
    x = np.random.default_rng(17).uniform(size=(2, 3, 16, 16))
    assert np.array_equal(model.predict(x), clone.predict(x))
