"""Named parameter storage and the AdamW update."""

from __future__ import annotations

from typing import Iterator, Tuple

import numpy as np

from . import tensor as T


class _Entry:
    __slots__ = ("tensor", "m", "v", "t", "trainable")

    def __init__(self, tensor: T.Tensor, trainable: bool):
        self.tensor = tensor
        self.trainable = trainable
        self.m = np.zeros_like(tensor.data)
        self.v = np.zeros_like(tensor.data)
        self.t = 0


class ParamStore:
    """Ordered map name -> tensor, with per-entry AdamW moment buffers.

    Iteration order is insertion order, which fixes checkpoint layout and
    keeps training deterministic.  Non-trainable entries (e.g. running
    statistics) are skipped by the optimizer but saved in checkpoints.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}

    def create(self, name: str, shape, init, dtype=np.float64, trainable: bool = True) -> T.Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.create(shape, init, dtype=dtype, requires_grad=trainable)
        self._entries[name] = _Entry(t, trainable)
        return t

    def add(self, name: str, arr: np.ndarray, trainable: bool = True) -> T.Tensor:
        """Register an already-initialized array under a unique name."""
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.from_array(arr)
        t.requires_grad = trainable
        self._entries[name] = _Entry(t, trainable)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> T.Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self) -> Iterator[Tuple[str, T.Tensor]]:
        return ((k, e.tensor) for k, e in self._entries.items())

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def num_values(self) -> int:
        return sum(e.tensor.data.size for e in self._entries.values())

    def zero_grads(self) -> None:
        for e in self._entries.values():
            if e.trainable:
                e.tensor.zero_grad()

    def grad_norm(self) -> float:
        sq = 0.0
        for e in self._entries.values():
            if e.trainable and e.tensor.grad is not None:
                sq += float((e.tensor.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(sq))

    def load_matching(self, other: "ParamStore") -> int:
        """Copy values from ``other`` for every name both stores share."""
        n = 0
        for name, e in self._entries.items():
            if name in other._entries:
                src = other._entries[name].tensor.data
                if src.shape != e.tensor.data.shape:
                    raise ValueError(f"shape mismatch for {name}: {src.shape} vs {e.tensor.data.shape}")
                e.tensor.data[...] = src
                n += 1
        return n


def adamw_step(store: ParamStore, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """Decoupled-weight-decay AdamW step over all trainable entries.

    Gradients must be populated (zero counts as populated) and are left
    untouched; the caller zeroes them between steps.
    """
    b1, b2 = betas
    for name, e in store._entries.items():
        if not e.trainable:
            continue
        g = e.tensor.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        e.t += 1
        e.m *= b1
        e.m += (1.0 - b1) * g
        e.v *= b2
        e.v += (1.0 - b2) * (g * g)
        m_hat = e.m / (1.0 - b1**e.t)
        v_hat = e.v / (1.0 - b2**e.t)
        w = e.tensor.data
        w -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            w -= lr * weight_decay * w
