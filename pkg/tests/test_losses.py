"""Tempered softmax, cross-entropy and KL: hand values plus FD oracles."""

import numpy as np
import pytest

from dualnets.engine import (
    EngineError,
    cross_entropy,
    kl_divergence,
    max_rel_error,
    numerical_gradient,
    softmax_with_temperature,
)


def test_softmax_symmetry():
    for tau in (0.3, 1.0, 7.0):
        assert np.allclose(softmax_with_temperature([0.0, 0.0], tau), [0.5, 0.5])


def test_softmax_hand_case():
    p = softmax_with_temperature([np.log(3.0), 0.0], 1.0)
    assert np.allclose(p, [0.75, 0.25], atol=1e-12)


def test_softmax_large_temperature_limit():
    p = softmax_with_temperature([5.0, 1.0], 1e8)
    assert np.allclose(p, [0.5, 0.5], atol=1e-7)
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(50, 7)) * 20
    p = softmax_with_temperature(logits, 2.0)
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(EngineError):
        softmax_with_temperature([1.0, 2.0], 0.0)
    with pytest.raises(EngineError):
        softmax_with_temperature([1.0, 2.0], -1.0)


def test_cross_entropy_uniform_prediction():
    loss, grad = cross_entropy([0.0, 0.0], 0)
    assert abs(loss - np.log(2.0)) < 1e-12
    assert np.allclose(grad, [-0.5, 0.5], atol=1e-12)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(EngineError, match="out of range"):
        cross_entropy([0.0, 1.0], 2)


def test_cross_entropy_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(50):
        logits = rng.normal(size=6) * 5
        loss, _ = cross_entropy(logits, int(rng.integers(6)))
        assert loss >= 0.0


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=4)
    label = int(rng.integers(4))
    _, grad = cross_entropy(logits, label)
    num = numerical_gradient(lambda: cross_entropy(logits, label)[0], logits)
    assert max_rel_error(grad, num) < 1e-6


def test_kl_zero_for_identical_logits():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 5))
    loss, grad = kl_divergence(logits, logits.copy(), 2.0)
    assert loss == 0.0
    assert np.allclose(grad, 0.0)


def test_kl_hand_case():
    # KL( [0.75, 0.25] || [0.5, 0.5] ) = 0.75 ln 1.5 + 0.25 ln 0.5
    expected = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
    loss, _ = kl_divergence([0.0, 0.0], [np.log(3.0), 0.0], 1.0)
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.1308) < 1e-4


def test_kl_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = rng.normal(size=4) * 3
        b = rng.normal(size=4) * 3
        loss, _ = kl_divergence(a, b, float(rng.uniform(0.5, 5.0)))
        assert loss >= 0.0


def test_kl_rejects_shape_mismatch():
    with pytest.raises(EngineError, match="shapes differ"):
        kl_divergence(np.zeros(3), np.zeros(4), 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_kl_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=5)
    q = rng.normal(size=5)
    tau = float(rng.uniform(0.5, 4.0))
    _, grad = kl_divergence(p, q, tau)
    num = numerical_gradient(lambda: kl_divergence(p, q, tau)[0], p)
    assert max_rel_error(grad, num) < 1e-6


def test_batched_losses_average_over_rows():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 4))
    labels = np.array([0, 2, 1])
    loss, grad = cross_entropy(logits, labels)
    singles = [cross_entropy(logits[i], labels[i]) for i in range(3)]
    assert abs(loss - np.mean([s[0] for s in singles])) < 1e-12
    assert np.allclose(grad, np.stack([s[1] for s in singles]) / 3)
