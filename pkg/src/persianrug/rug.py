"""Hadamard matrices, Persian rug effective matrices and the variance bound
they saturate.

The Hadamard matrix is the Sylvester one, ``H[i, j] = (-1)^popcount(i & j)``.
A rug keeps ``n_d`` of its columns ``S`` and forms
``R = H[:, S] @ H[:, S].T / n_d``: unit diagonal, symmetric, and ``n_s / n_d``
times a rank-``n_d`` orthogonal projector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .datagen import data_moments
from .model import ToyModel

MAX_ORDER = 13  # 8192^2 float64 entries is 0.5 GB


@dataclass(frozen=True)
class RugSpec:
    m: int
    n_d: int
    S: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        n_s = 1 << self.m
        if not 1 <= self.n_d <= n_s:
            raise ValueError(f"need 1 <= n_d <= 2^m, got n_d={self.n_d}, m={self.m}")
        if len(self.S) != self.n_d or len(set(self.S)) != self.n_d:
            raise ValueError("S must hold n_d distinct column indices")
        if min(self.S) < 0 or max(self.S) >= n_s:
            raise ValueError(f"column index out of range [0, {n_s})")

    @property
    def n_s(self) -> int:
        return 1 << self.m

    @classmethod
    def random(cls, m: int, n_d: int, seed: int = 0) -> "RugSpec":
        """Uniformly random ``n_d``-subset of the ``2^m`` columns."""
        if m < 0:
            raise ValueError("m must be nonnegative")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        S = np.sort(rng.choice(1 << m, size=n_d, replace=False))
        return cls(m, n_d, tuple(int(k) for k in S), seed)

    @classmethod
    def for_size(cls, n_s: int, n_d: int, seed: int = 0, S=None) -> "RugSpec":
        m = order_of(n_s)
        if S is None:
            return cls.random(m, n_d, seed)
        return cls(m, n_d, tuple(int(k) for k in S), seed)


def order_of(n_s: int) -> int:
    """``m`` with ``n_s == 2^m``; raises for other sizes."""
    if n_s < 1 or n_s & (n_s - 1):
        raise ValueError(f"n_s={n_s} is not a power of two")
    return n_s.bit_length() - 1


def hadamard(m: int, dtype=np.int8) -> np.ndarray:
    """Sylvester Hadamard matrix of order ``2^m`` with ``+1`` for even parity."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    if m > MAX_ORDER:
        raise MemoryError(f"hadamard order 2^{m} exceeds the 2^{MAX_ORDER} memory budget")
    n = 1 << m
    idx = np.arange(n, dtype=np.uint32)
    parity = np.zeros((n, n), dtype=np.uint8)
    anded = idx[:, None] & idx[None, :]
    for bit in range(m):
        parity ^= ((anded >> bit) & 1).astype(np.uint8)
    return (1 - 2 * parity.astype(np.int16)).astype(dtype)


def factorize_rug(layout: RugSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(W_in, W_out)`` with ``W_out @ W_in == persian_rug(layout)``.

    Row ``k`` of ``W_in`` is Hadamard column ``S[k]`` scaled by ``n_d^{-1/2}``.
    """
    H = hadamard(layout.m, dtype=np.float64)
    W_in = H[:, list(layout.S)].T / math.sqrt(layout.n_d)
    return W_in, W_in.T.copy()


def persian_rug(layout: RugSpec) -> np.ndarray:
    H = hadamard(layout.m, dtype=np.float64)
    cols = H[:, list(layout.S)]
    return (cols @ cols.T) / layout.n_d


class SigmaBound(NamedTuple):
    p: float
    n_s: int
    n_d: int
    bound_value: float


def sigma_lower_bound(p: float, n_s: int, n_d: int) -> SigmaBound:
    """Least mean interference variance over unit-diagonal rank-``n_d`` matrices."""
    if not 1 <= n_d <= n_s:
        raise ValueError(f"need 1 <= n_d <= n_s, got n_d={n_d}, n_s={n_s}")
    if not 0 <= p <= 1:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return SigmaBound(p, n_s, n_d, data_moments(p)[2] * (n_s / n_d - 1.0))


class NoiseSigma(NamedTuple):
    variance: float
    sigma: float


def noise_sigma(W: np.ndarray, p: float) -> NoiseSigma:
    """Mean over rows of the interference variance, rows scaled to unit diagonal."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("W must be square")
    diag = np.diag(W)
    if np.any(diag == 0):
        raise ValueError("zero diagonal entry; rows cannot be normalized")
    scaled = W / diag[:, None]
    offdiag_sq = np.einsum("ij,ij->i", scaled, scaled) - 1.0
    var = data_moments(p)[2] * float(np.mean(offdiag_sq))
    return NoiseSigma(var, math.sqrt(max(var, 0.0)))


def rug_model(layout: RugSpec, a: float, b: float, p: float) -> ToyModel:
    """Toy model realizing the macro parameters ``(a, b)`` on a rug.

    The interference mean ``a * E[x] * sum_{j != i} R_ij`` is subtracted from
    each bias so every output sees zero-mean noise, as the reduced loss assumes.
    """
    W_in, W_out = factorize_rug(layout)
    R = W_out @ W_in
    offdiag_sum = R.sum(axis=1) - np.diag(R)
    bias = b - a * data_moments(p)[0] * offdiag_sum
    return ToyModel(W_in, a * W_out, bias)


def write_pgm(matrix: np.ndarray, path) -> None:
    """Binary PGM (P5), entries mapped affinely from [min, max] onto [0, 255]."""
    M = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(M.min()), float(M.max())
    if hi > lo:
        img = np.rint((M - lo) * (255.0 / (hi - lo))).astype(np.uint8)
    else:
        img = np.zeros(M.shape, dtype=np.uint8)
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=pos).reshape(rows, cols)
