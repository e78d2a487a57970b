"""Two-view augmentation and the redundancy-reduction (Barlow Twins) loss.

The loss drives the cross-correlation matrix between embeddings of two
augmented views toward the identity:

    L = sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2
    C_ij = sum_b zA[b,i] zB[b,j] / (||zA[:,i]|| ||zB[:,j]||)

Column norms are the raw (uncentered) L2 norms, guarded by a small epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import DTYPE, EngineError
from .seeding import child_rng

NORM_EPS = 1e-12


@dataclass(frozen=True)
class AugmentPolicy:
    """Image augmentation: random crop (zero-padded), horizontal flip,
    per-channel brightness scaling and additive Gaussian pixel noise.

    Outputs are clamped to ``value_range``. Every transform is drawn from the
    RNG stream passed in, so a view is fully determined by
    (seed, sample index, view index).
    """

    crop_pad: int = 4
    flip_prob: float = 0.5
    brightness: tuple[float, float] | None = (0.8, 1.2)
    noise_sigma: float = 0.02
    value_range: tuple[float, float] = (0.0, 1.0)

    @staticmethod
    def identity() -> "AugmentPolicy":
        return AugmentPolicy(crop_pad=0, flip_prob=0.0, brightness=None, noise_sigma=0.0)

    @staticmethod
    def crop_flip() -> "AugmentPolicy":
        """The weakened supervised-path policy: random crop + flip only."""
        return AugmentPolicy(brightness=None, noise_sigma=0.0)


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply ``policy`` to a (batch, channels, H, W) array."""
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 4:
        raise EngineError(f"augment expects NCHW, got shape {x.shape}")
    b, c, h, w = x.shape
    out = x
    if policy.crop_pad > 0:
        p = policy.crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, 2 * p + 1, size=(b, 2))
        out = np.stack(
            [padded[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offs)]
        )
    if policy.flip_prob > 0:
        flips = rng.random(b) < policy.flip_prob
        if flips.any():
            out = out.copy()
            out[flips] = out[flips][..., ::-1]
    if policy.brightness is not None:
        lo, hi = policy.brightness
        scale = rng.uniform(lo, hi, size=(b, c))
        out = out * scale[:, :, None, None]
    if policy.noise_sigma > 0:
        out = out + rng.normal(0.0, policy.noise_sigma, size=out.shape)
    if policy.brightness is not None or policy.noise_sigma > 0 or policy.crop_pad > 0:
        out = np.clip(out, policy.value_range[0], policy.value_range[1])
    return np.ascontiguousarray(out)


def make_views(batch: np.ndarray, policy: AugmentPolicy, seed: int) -> ViewPair:
    """Two independently augmented copies of ``batch``, deterministic in ``seed``."""
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.shape[0] == 0:
        raise EngineError("cannot make views of an empty batch")
    view_a = augment(batch, policy, child_rng(seed, "view", 0))
    view_b = augment(batch, policy, child_rng(seed, "view", 1))
    return ViewPair(view_a=view_a, view_b=view_b)


@dataclass(frozen=True)
class BarlowConfig:
    lambda_bt: float = 2e-3
    projector_hidden: int = 256
    projector_out: int = 128

    def __post_init__(self):
        if self.lambda_bt <= 0:
            raise EngineError(f"lambda_bt must be positive, got {self.lambda_bt}")


def cross_correlation(z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
    """Norm-scaled cross-correlation matrix between two (batch, dim) embeddings."""
    z_a = np.asarray(z_a, dtype=DTYPE)
    z_b = np.asarray(z_b, dtype=DTYPE)
    if z_a.shape != z_b.shape:
        raise EngineError(f"embedding shapes differ: {z_a.shape} vs {z_b.shape}")
    if z_a.ndim != 2 or z_a.shape[0] < 2:
        raise EngineError(f"cross_correlation needs a (batch >= 2, dim) matrix, got {z_a.shape}")
    na = np.sqrt((z_a**2).sum(axis=0)) + NORM_EPS
    nb = np.sqrt((z_b**2).sum(axis=0)) + NORM_EPS
    return (z_a.T @ z_b) / np.outer(na, nb)


def barlow_twins_loss(c: np.ndarray, lambda_bt: float):
    """Loss value and its gradient with respect to the correlation matrix."""
    c = np.asarray(c, dtype=DTYPE)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise EngineError(f"correlation matrix must be square, got {c.shape}")
    d = np.diagonal(c)
    off = c - np.diag(d)
    loss = float(((1.0 - d) ** 2).sum() + lambda_bt * (off**2).sum())
    grad = 2.0 * lambda_bt * off
    np.fill_diagonal(grad, -2.0 * (1.0 - d))
    return loss, grad


def barlow_loss_from_embeddings(z_a: np.ndarray, z_b: np.ndarray, lambda_bt: float):
    """End-to-end loss with gradients into both embeddings (through the
    norm-scaled correlation of the two views)."""
    z_a = np.asarray(z_a, dtype=DTYPE)
    z_b = np.asarray(z_b, dtype=DTYPE)
    na = np.sqrt((z_a**2).sum(axis=0)) + NORM_EPS
    nb = np.sqrt((z_b**2).sum(axis=0)) + NORM_EPS
    c = (z_a.T @ z_b) / np.outer(na, nb)
    loss, dc = barlow_twins_loss(c, lambda_bt)
    # d/dzA of C_ij = zB[b,j]/(na_i nb_j) - C_ij * zA[b,i] / na_i^2
    dz_a = (z_b / nb) @ dc.T / na - z_a * ((dc * c).sum(axis=1) / na**2)
    dz_b = (z_a / na) @ dc / nb - z_b * ((dc * c).sum(axis=0) / nb**2)
    return loss, dz_a, dz_b
