"""Deterministic tensor helpers and counter-based randomness.

Tensors are plain ``torch.Tensor`` values. Unit-level arithmetic defaults to
float64; the denoiser itself may run in float32 for speed.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float64


class DimensionError(ValueError):
    pass


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Backed by numpy's Philox bit generator, so a given key reproduces the same
    stream on any platform. Child streams are derived with :meth:`child`
    instead of sharing one instance between consumers.
    """

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "Rng":
        return Rng(self.seed, self.stream + (index,))

    def normal(self, shape) -> np.ndarray:
        # numpy's ziggurat transform
        return self._gen.standard_normal(tuple(shape))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def gaussian(rng: Rng, shape, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    """I.i.d. standard normal samples drawn from ``rng``."""
    return torch.from_numpy(rng.normal(shape)).to(dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of 2-D tensors.

    Summation order is whatever the single-threaded CPU kernel picks for the
    given shapes; it is fixed per shape, so repeated calls are bit-identical.
    """
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_rows(a: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last axis with max subtraction."""
    shifted = a - a.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def resize_nearest(a: torch.Tensor, h2: int, w2: int) -> torch.Tensor:
    """Nearest-neighbour resize of the trailing two axes.

    Source index for output row ``i`` is ``floor((i + 0.5) * h / h2)``.
    """
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"target size must be positive, got {h2}x{w2}")
    h, w = a.shape[-2], a.shape[-1]
    # integer form of the floor keeps the index exact
    rows = [((2 * i + 1) * h) // (2 * h2) for i in range(h2)]
    cols = [((2 * j + 1) * w) // (2 * w2) for j in range(w2)]
    rows_t = torch.tensor(rows, dtype=torch.long)
    cols_t = torch.tensor(cols, dtype=torch.long)
    return a.index_select(-2, rows_t).index_select(-1, cols_t)
