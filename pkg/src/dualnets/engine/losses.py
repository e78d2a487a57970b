"""Classification losses: tempered softmax, cross-entropy, tempered KL.

All three accept a single logit vector or a (batch, classes) matrix; batched
losses are means over rows and gradients are gradients of that mean.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, EngineError


def softmax_with_temperature(logits, tau: float) -> np.ndarray:
    """Row-wise softmax of ``logits / tau`` with max-subtraction for stability."""
    if tau <= 0:
        raise EngineError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=DTYPE) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its logit gradient.

    Returns ``(loss, grad)`` with ``grad = (softmax(logits) - onehot) / batch``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = np.asarray([labels])
    else:
        labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise EngineError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise EngineError(f"label out of range for {c} classes")
    p = softmax_with_temperature(logits, 1.0)
    rows = np.arange(b)
    loss = float(-np.log(p[rows, labels]).mean())
    grad = p.copy()
    grad[rows, labels] -= 1.0
    grad /= b
    if single:
        grad = grad[0]
    return loss, grad


def kl_divergence(p_logits, q_logits, tau: float):
    """Tempered KL between the distributions of two logit sets.

    Computes ``KL( softmax(q/tau) || softmax(p/tau) )`` averaged over rows.
    ``q_logits`` is the constant reference (e.g. a stored logit snapshot);
    the returned gradient is with respect to ``p_logits`` only, which is the
    side the model currently predicts.
    """
    p_logits = np.asarray(p_logits, dtype=DTYPE)
    q_logits = np.asarray(q_logits, dtype=DTYPE)
    if p_logits.shape != q_logits.shape:
        raise EngineError(
            f"logit shapes differ: {p_logits.shape} vs {q_logits.shape}"
        )
    single = p_logits.ndim == 1
    if single:
        p_logits = p_logits[None, :]
        q_logits = q_logits[None, :]
    b = p_logits.shape[0]
    p = softmax_with_temperature(p_logits, tau)
    q = softmax_with_temperature(q_logits, tau)
    # sum q * (log q - log p), guarded against exact zeros from underflow
    tiny = np.finfo(DTYPE).tiny
    loss = float((q * (np.log(q + tiny) - np.log(p + tiny))).sum(axis=-1).mean())
    grad = (p - q) / (tau * b)
    if single:
        grad = grad[0]
    return max(loss, 0.0), grad
