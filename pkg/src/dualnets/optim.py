"""Parameter update rules: plain SGD and the look-ahead wrapper.

The look-ahead round performs K inner SGD steps on shadow weights seeded from
the live parameters, then pulls the live parameters toward the shadow result:

    shadow_0 = phi
    shadow_k = shadow_{k-1} - eps * grad(L)      k = 1..K
    phi      = phi + beta * (shadow_K - phi)

With K=1 the round is exactly one SGD step with learning rate beta * eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import EngineError, ParamSet


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    momentum: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise EngineError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise EngineError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class LookaheadConfig:
    k: int = 3
    eps: float = 3e-4
    beta: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise EngineError(f"look-ahead K must be >= 1, got {self.k}")
        if self.eps <= 0:
            raise EngineError(f"look-ahead eps must be positive, got {self.eps}")
        if not (0.0 < self.beta <= 1.0):
            raise EngineError(f"look-ahead beta must lie in (0, 1], got {self.beta}")


def sgd_step(params: ParamSet, lr: float):
    """One step ``p <- p - lr * grad(p)``; gradients are then cleared."""
    if lr < 0:
        raise EngineError(f"lr must be nonnegative, got {lr}")
    params.grad_axpy(-lr)  # rejects missing gradients
    params.zero_grads()


class Sgd:
    """Stateful SGD with optional heavy-ball momentum."""

    def __init__(self, cfg: SgdConfig):
        self.cfg = cfg
        self._velocity: list[np.ndarray] | None = None

    def step(self, params: ParamSet):
        if self.cfg.momentum == 0.0:
            sgd_step(params, self.cfg.lr)
            return
        grads = [t.grad for _, t in params]
        if any(g is None for g in grads):
            raise EngineError("missing gradient in Sgd.step")
        if self._velocity is None:
            self._velocity = [np.zeros_like(t.data) for _, t in params]
        for (_, t), v in zip(params, self._velocity):
            v *= self.cfg.momentum
            v += t.grad
            t.data -= self.cfg.lr * v
        params.zero_grads()


def lookahead_round(params: ParamSet, loss_closure, cfg: LookaheadConfig) -> float:
    """One look-ahead round over the live ``params``.

    ``loss_closure`` evaluates the loss at the current parameter values (for
    the slow learner: Barlow Twins on a freshly sampled memory mini-batch)
    and populates gradients. Returns the last inner-step loss. A non-finite
    loss aborts the round and restores the pre-round parameters.
    """
    anchor = params.copy()
    last = float("nan")
    for _ in range(cfg.k):
        params.zero_grads()
        loss = float(loss_closure())
        if not np.isfinite(loss):
            params.set_from(anchor)
            params.zero_grads()
            raise EngineError(f"look-ahead closure produced non-finite loss {loss}")
        params.grad_axpy(-cfg.eps)
        params.zero_grads()
        last = loss
    # live params now hold shadow_K; interpolate back toward the anchor
    params.set_from(ParamSet.interpolate(anchor, params, cfg.beta))
    return last
