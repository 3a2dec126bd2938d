"""Backend selection for the training hot loop.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``PERSIANRUG_BACKEND=python`` to force the fallback.

Parameters are held as two ``(n_s, n_d)`` row-major factors: ``enc`` is
``W_in`` transposed and ``dec`` is ``W_out``, so row ``j`` of either is the
embedding of feature ``j``.
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

AVAILABLE = ("compiled", "python") if _kernels is not None else ("python",)
_forced = os.environ.get("PERSIANRUG_BACKEND", "").strip().lower()
if _forced and _forced not in ("compiled", "python"):
    raise ImportError(f"unknown PERSIANRUG_BACKEND {_forced!r}")
if _forced == "compiled" and _kernels is None:
    raise ImportError("PERSIANRUG_BACKEND=compiled but the extension is not built")
DEFAULT_BACKEND = _forced or AVAILABLE[0]

# above this fill fraction the backward signal goes through BLAS instead;
# the sparse products are memory bound and lose to sgemm beyond about 5%
DENSE_CUTOFF = 0.05


def _resolve(backend):
    backend = backend or DEFAULT_BACKEND
    if backend not in AVAILABLE:
        raise ValueError(f"backend {backend!r} unavailable; have {AVAILABLE}")
    return backend


def loss_grad(enc, dec, b, x, g_enc, g_dec, g_b, backend=None):
    """Summed squared error of one batch; gradients of the batch mean go to ``g_*``."""
    if _resolve(backend) == "python":
        h = x @ enc
        pre = h @ dec.T
        pre += b
        total, _ = _fallback.relu_residual(pre, x, g_b)
        np.matmul(pre.T, h, out=g_dec)
        g_h = pre @ dec
        np.matmul(x.T, g_h, out=g_enc)
        return total

    k = _kernels
    xi = k.csr_rows(x)
    h = np.empty((x.shape[0], enc.shape[1]), dtype=x.dtype)
    k.csr_matmul(*xi, enc, h)
    pre = h @ dec.T
    pre += b
    total, active = k.relu_residual(pre, x, g_b)
    if active > DENSE_CUTOFF * pre.size:
        np.matmul(pre.T, h, out=g_dec)
        g_h = pre @ dec
    else:
        di = k.csr_rows(pre)
        k.csr_tmatmul(*di, h, g_dec)
        g_h = h  # h is dead once g_dec is formed
        k.csr_matmul(*di, dec, g_h)
    k.csr_tmatmul(*xi, g_h, g_enc)
    return total


def batch_loss(enc, dec, b, x, backend=None):
    """Summed squared error of ReLU(x W_in^T W_out^T + b) against x."""
    if _resolve(backend) == "python":
        pre = (x @ enc) @ dec.T
        pre += b
        return _fallback.relu_loss(pre, x)
    k = _kernels
    xi = k.csr_rows(x)
    h = np.empty((x.shape[0], enc.shape[1]), dtype=x.dtype)
    k.csr_matmul(*xi, enc, h)
    pre = h @ dec.T
    pre += b
    return k.relu_loss(pre, x)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t, backend=None):
    """In-place Adam step on flat contiguous arrays."""
    if _resolve(backend) == "python":
        _fallback.adam_update(param, grad, m, v, lr, beta1, beta2, eps, t)
    else:
        _kernels.adam_update(param, grad, m, v, lr, beta1, beta2, eps, t)
