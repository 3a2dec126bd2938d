"""Toy ReLU autoencoder: forward pass, loss, exact gradients, Adam training
and the TMSW weight file format."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .datagen import DataConfig, sample_batch

log = logging.getLogger(__name__)


@dataclass
class ToyModel:
    """``f(x) = ReLU(W_out @ W_in @ x + b)`` with ``W_in`` of shape (n_d, n_s)."""

    W_in: np.ndarray
    W_out: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W_in = np.asarray(self.W_in, dtype=np.float64)
        self.W_out = np.asarray(self.W_out, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        n_d, n_s = self.W_in.shape
        if self.W_out.shape != (n_s, n_d) or self.b.shape != (n_s,):
            raise ValueError(
                f"inconsistent shapes W_in {self.W_in.shape}, W_out {self.W_out.shape}, b {self.b.shape}"
            )

    @property
    def n_s(self) -> int:
        return self.W_in.shape[1]

    @property
    def n_d(self) -> int:
        return self.W_in.shape[0]

    @property
    def ratio(self) -> float:
        return self.n_d / self.n_s

    @classmethod
    def initialize(cls, n_s: int, n_d: int, seed: int = 0, scheme: str = "tied") -> "ToyModel":
        """Random initialization with zero bias.

        ``"fan_in"``: independent Gaussians with std ``1/sqrt(n_s)`` (W_in) and
        ``1/sqrt(n_d)`` (W_out). ``"tied"``: W_in with std ``1/sqrt(n_d)`` and
        ``W_out = W_in.T``, so every diagonal entry of W starts near 1 and no
        output starts out dominated by interference.
        """
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1,))))
        if scheme == "fan_in":
            W_in = rng.standard_normal((n_d, n_s)) / np.sqrt(n_s)
            W_out = rng.standard_normal((n_s, n_d)) / np.sqrt(n_d)
        elif scheme == "tied":
            W_in = rng.standard_normal((n_d, n_s)) / np.sqrt(n_d)
            W_out = W_in.T.copy()
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        return cls(W_in, W_out, np.zeros(n_s))


def _check_batch(model: ToyModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.n_s:
        raise ValueError(f"batch of shape {batch.shape} does not match n_s={model.n_s}")
    return batch


def forward(model: ToyModel, batch: np.ndarray) -> np.ndarray:
    """Reconstructions, one row per input row."""
    batch = _check_batch(model, batch)
    pre = (batch @ model.W_in.T) @ model.W_out.T + model.b
    return np.maximum(pre, 0.0)


def loss(model: ToyModel, batch: np.ndarray, per_feature: bool = False) -> float:
    """Mean over rows of ``||x - f(x)||^2``; divided by ``n_s`` if ``per_feature``."""
    batch = _check_batch(model, batch)
    resid = batch - forward(model, batch)
    value = float(np.einsum("ij,ij->", resid, resid)) / batch.shape[0]
    return value / model.n_s if per_feature else value


def loss_and_grad(model: ToyModel, batch: np.ndarray, backend=None):
    """Batch-mean loss and its gradients ``(g_W_in, g_W_out, g_b)``.

    The ReLU derivative at exactly zero is taken as zero.
    """
    batch = np.ascontiguousarray(_check_batch(model, batch))
    enc = np.ascontiguousarray(model.W_in.T)
    dec = np.ascontiguousarray(model.W_out)
    g_enc = np.empty_like(enc)
    g_dec = np.empty_like(dec)
    g_b = np.empty_like(model.b)
    total = kernels.loss_grad(enc, dec, model.b, batch, g_enc, g_dec, g_b, backend=backend)
    return total / batch.shape[0], (g_enc.T.copy(), g_dec, g_b)


def evaluate_loss(model: ToyModel, cfg: DataConfig, n_samples: int = 2**16,
                  chunk: int = 4096, backend=None) -> float:
    """Per-feature loss on ``n_samples`` held-out rows.

    The held-out stream uses batch indices counting down from ``2**63`` so it
    never overlaps a training stream with the same seed.
    """
    enc = np.ascontiguousarray(model.W_in.T)
    dec = np.ascontiguousarray(model.W_out)
    total, done, index = 0.0, 0, 2**63
    while done < n_samples:
        n = min(chunk, n_samples - done)
        x = sample_batch(cfg, n, index=index)
        total += kernels.batch_loss(enc, dec, model.b, x, backend=backend)
        done += n
        index += 1
    return total / (n_samples * model.n_s)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    window: int = 100
    max_steps: int = 50_000
    seed: int = 0
    dtype: str = "float32"
    init: str = "tied"
    backend: str | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.window < 1 or self.max_steps < 1:
            raise ValueError("batch_size, window and max_steps must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class TrainReport:
    steps_taken: int
    final_loss_per_feature: float
    loss_trace: list[tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False


def should_stop(window_means: list[float]) -> bool:
    """Stop once the latest window mean is not below the one before it."""
    return len(window_means) >= 2 and not window_means[-1] < window_means[-2]


def train(data_cfg: DataConfig, n_d: int, train_cfg: TrainConfig = TrainConfig(),
          init: ToyModel | None = None) -> tuple[ToyModel, TrainReport]:
    """Train with Adam on fresh batches until the windowed loss stops falling.

    Batch ``t`` (0-based) of the data stream is ``sample_batch(data_cfg, B, index=t)``.
    ``loss_trace`` holds ``(step, mean batch loss over the window ending at step)``.
    """
    if n_d < 1:
        raise ValueError(f"n_d must be >= 1, got {n_d}")
    cfg = train_cfg
    dtype = np.dtype(cfg.dtype)
    model = init if init is not None else ToyModel.initialize(data_cfg.n_s, n_d, cfg.seed, cfg.init)
    if (model.n_s, model.n_d) != (data_cfg.n_s, n_d):
        raise ValueError("initial model dimensions do not match the request")

    params = [
        np.ascontiguousarray(model.W_in.T, dtype=dtype),
        np.ascontiguousarray(model.W_out, dtype=dtype),
        model.b.astype(dtype),
    ]
    grads = [np.empty_like(q) for q in params]
    m1 = [np.zeros_like(q) for q in params]
    m2 = [np.zeros_like(q) for q in params]
    flat = [(q.reshape(-1), g.reshape(-1), a.reshape(-1), v.reshape(-1))
            for q, g, a, v in zip(params, grads, m1, m2)]

    window_sum = 0.0
    window_means: list[float] = []
    stopped = False
    step = 0
    while step < cfg.max_steps:
        x = sample_batch(data_cfg, cfg.batch_size, index=step, dtype=dtype)
        total = kernels.loss_grad(*params, x, *grads, backend=cfg.backend)
        value = total / cfg.batch_size
        step += 1
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        for q, g, a, v in flat:
            kernels.adam_update(q, g, a, v, cfg.learning_rate, cfg.adam_beta1,
                                cfg.adam_beta2, cfg.adam_eps, step, backend=cfg.backend)
        window_sum += value
        if step % cfg.window == 0:
            window_means.append(window_sum / cfg.window)
            window_sum = 0.0
            if should_stop(window_means):
                stopped = True
                break
        if step % 1000 == 0:
            log.debug("step %d loss/feature %.6g", step, value / data_cfg.n_s)

    trained = ToyModel(params[0].T.astype(np.float64), params[1].astype(np.float64),
                       params[2].astype(np.float64))
    trace = [((i + 1) * cfg.window, mean) for i, mean in enumerate(window_means)]
    final = window_means[-1] if window_means else window_sum / max(step, 1)
    return trained, TrainReport(step, final / data_cfg.n_s, trace, stopped)


MAGIC = b"TMSW"
VERSION = 1
_HEADER = struct.Struct("<4sBII")
MAX_ELEMENTS = 2**31


class ModelFormatError(ValueError):
    pass


def save_model(model: ToyModel, path) -> None:
    """Write ``model`` in the little-endian TMSW v1 format."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, model.n_s, model.n_d))
        for arr in (model.W_in, model.W_out, model.b):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> ToyModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"{path}: header truncated at byte {len(data)} of {_HEADER.size}")
    magic, version, n_s, n_d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    if n_s == 0 or n_d == 0:
        raise ModelFormatError(f"{path}: zero dimension n_s={n_s} n_d={n_d}")
    n_vals = 2 * n_s * n_d + n_s
    if n_s * n_d > MAX_ELEMENTS:
        raise ModelFormatError(f"{path}: dimensions n_s={n_s} n_d={n_d} overflow the size limit")
    expected = _HEADER.size + 8 * n_vals
    if len(data) < expected:
        pos = len(data) - _HEADER.size
        raise ModelFormatError(
            f"{path}: payload truncated at byte {len(data)} (value {pos // 8} of {n_vals}); "
            f"expected {expected} bytes"
        )
    if len(data) > expected:
        raise ModelFormatError(f"{path}: {len(data) - expected} trailing bytes after payload")
    vals = np.frombuffer(data, dtype="<f8", count=n_vals, offset=_HEADER.size).astype(np.float64)
    k = n_s * n_d
    return ToyModel(vals[:k].reshape(n_d, n_s), vals[k:2 * k].reshape(n_s, n_d), vals[2 * k:])
