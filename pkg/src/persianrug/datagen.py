"""Sparse i.i.d. feature data and its exact moments.

Each feature is ``x = c * u`` with ``c ~ Bernoulli(p)`` and ``u ~ Uniform[0, 1)``.

Sampling uses one uniform draw per entry: with ``U ~ Uniform[0, 1)``, the
feature is on iff ``U < p``, and conditioned on that event ``U / p`` is again
uniform on ``[0, 1)`` and independent of the event. The stream for batch
``index`` comes from a Philox-4x64 counter-based generator keyed by
``SeedSequence((seed, index))``, so any batch can be regenerated in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DataConfig:
    p: float
    n_s: int
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"feature probability p must lie in [0, 1], got {self.p}")
        if self.n_s < 1:
            raise ValueError(f"n_s must be >= 1, got {self.n_s}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def batch_generator(seed: int, index: int = 0) -> np.random.Generator:
    """Philox generator for batch ``index`` of stream ``seed``."""
    ss = np.random.SeedSequence((int(seed), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def sample_batch(cfg: DataConfig, n: int, index: int = 0, dtype=np.float64) -> np.ndarray:
    """Draw an ``n x n_s`` batch of sparse features.

    Deterministic in ``(cfg, n, index, dtype)``.
    """
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    if not 0.0 <= cfg.p <= 1.0:
        raise ValueError(f"feature probability p must lie in [0, 1], got {cfg.p}")
    rng = batch_generator(cfg.seed, index)
    u = rng.random((n, cfg.n_s), dtype=np.float64)
    if cfg.p == 0.0:
        return np.zeros((n, cfg.n_s), dtype=dtype)
    # U/p for U<p is uniform on [0,1); guard the rounding edge U/p == 1.0
    x = np.where(u < cfg.p, np.minimum(u / cfg.p, np.nextafter(1.0, 0.0)), 0.0)
    return x.astype(dtype, copy=False)


def data_moments(p: float) -> tuple[float, float, float]:
    """Return ``(mean, second_moment, variance)`` of a single sparse feature."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"feature probability p must lie in [0, 1], got {p}")
    return p / 2.0, p / 3.0, (4.0 * p - 3.0 * p * p) / 12.0
