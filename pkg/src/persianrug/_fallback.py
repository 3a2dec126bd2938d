"""Pure numpy versions of the compiled training kernels.

Same signatures and in-place semantics as ``_kernels``; products are dense.
"""

import numpy as np


def relu_residual(pre, x, grad_b):
    active = pre > 0
    resid = np.where(active, pre - x, -x)
    total = float(np.einsum("ij,ij->", resid, resid, dtype=np.float64))
    np.multiply(resid, active, out=pre)
    pre *= 2.0 / pre.shape[0]
    grad_b[:] = pre.sum(axis=0)
    return total, int(np.count_nonzero(active))


def relu_loss(pre, x):
    resid = np.maximum(pre, 0) - x
    return float(np.einsum("ij,ij->", resid, resid, dtype=np.float64))


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    step = lr / (1.0 - beta1**t)
    denom = np.sqrt(v * (1.0 / (1.0 - beta2**t)))
    denom += eps
    param -= (step * m / denom).astype(param.dtype, copy=False)
