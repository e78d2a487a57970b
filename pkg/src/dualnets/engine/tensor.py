"""Dense tensors with gradient slots, and ordered parameter collections.

Arrays flowing between layers are plain ``numpy.ndarray``; a Tensor boxes a
value together with its gradient accumulation buffer, which is what layers
store their weights as and what the optimizers consume.
"""

from __future__ import annotations

import numpy as np

# Build-time precision switch. Tests and the acceptance suite run at 64-bit;
# float32 halves memory traffic when gradient checks are not needed.
DTYPE = np.float64


class EngineError(ValueError):
    """Raised when an engine operation is called outside its contract."""


def as_dtype(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise EngineError(f"non-finite values in {what}")
    return x


class Tensor:
    """A dense n-d array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = as_dtype(data)
        self.grad = None if grad is None else as_dtype(grad)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise EngineError(
                f"grad shape {self.grad.shape} != data shape {self.data.shape}"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g: np.ndarray):
        """Accumulate into the gradient slot (allocating it on first use)."""
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.data.shape:
            raise EngineError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"


class ParamSet:
    """Ordered, named collection of Tensors (shared, not copied).

    The set holds references to the live parameter Tensors of a model, so
    in-place updates through a ParamSet are visible to the model. ``copy``
    produces an independent value snapshot.
    """

    def __init__(self, named):
        self._names = [n for n, _ in named]
        self._tensors = [t for _, t in named]
        if len(set(self._names)) != len(self._names):
            raise EngineError("duplicate parameter names in ParamSet")

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(zip(self._names, self._tensors))

    @property
    def names(self):
        return list(self._names)

    @property
    def tensors(self):
        return list(self._tensors)

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors)

    def copy(self) -> "ParamSet":
        return ParamSet([(n, t.copy()) for n, t in self])

    def zero_grads(self):
        for t in self._tensors:
            t.zero_grad()

    def grads_populated(self) -> bool:
        return all(t.grad is not None for t in self._tensors)

    def set_from(self, other: "ParamSet"):
        """Copy values from ``other`` into the live tensors."""
        self._check_aligned(other)
        for mine, theirs in zip(self._tensors, other._tensors):
            mine.data[...] = theirs.data

    def axpy(self, alpha: float, other: "ParamSet"):
        """In-place ``self += alpha * other`` over parameter values."""
        self._check_aligned(other)
        for mine, theirs in zip(self._tensors, other._tensors):
            mine.data += alpha * theirs.data

    def grad_axpy(self, alpha: float):
        """In-place ``self += alpha * self.grad``; requires populated grads."""
        for name, t in self:
            if t.grad is None:
                raise EngineError(f"missing gradient for parameter '{name}'")
            t.data += alpha * t.grad

    @staticmethod
    def interpolate(a: "ParamSet", b: "ParamSet", beta: float) -> "ParamSet":
        """Value snapshot of ``(1 - beta) * a + beta * b``.

        Exact at the endpoints: beta=0 returns a copy of ``a``, beta=1 a copy
        of ``b``.
        """
        a._check_aligned(b)
        if beta == 0.0:
            return a.copy()
        if beta == 1.0:
            return b.copy()
        return ParamSet(
            [
                (n, Tensor(ta.data + beta * (tb.data - ta.data)))
                for (n, ta), (_, tb) in zip(a, b)
            ]
        )

    def _check_aligned(self, other: "ParamSet"):
        if self._names != other._names:
            raise EngineError("ParamSet name mismatch")
        for mine, theirs in zip(self._tensors, other._tensors):
            if mine.data.shape != theirs.data.shape:
                raise EngineError("ParamSet shape mismatch")

    def flat_values(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._tensors]) if self._tensors else np.zeros(0)

    def flat_grads(self) -> np.ndarray:
        out = []
        for name, t in self:
            if t.grad is None:
                raise EngineError(f"missing gradient for parameter '{name}'")
            out.append(t.grad.ravel())
        return np.concatenate(out) if out else np.zeros(0)

    def load_flat_values(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.num_values():
            raise EngineError("flat vector size mismatch")
        off = 0
        for t in self._tensors:
            t.data[...] = flat[off : off + t.size].reshape(t.shape)
            off += t.size
