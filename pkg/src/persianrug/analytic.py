"""Reduced (a, b, sigma) description of a permutation-symmetric model.

Under the symmetric ansatz each output sees ``ReLU(a * (x + nu) + b)`` with
``x`` a sparse feature and ``nu ~ N(0, sigma^2)`` the interference from all
other features (its mean is folded into ``b``). The loss splits into an
"off" part (feature absent) with a closed form, and an "on" part that is a
one-dimensional integral over the feature magnitude ``u`` of closed-form
Gaussian moments.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import optimize, special

from .datagen import data_moments
from .rug import sigma_lower_bound

_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

DEFAULT_NODES = 64
QUAD_TOL = 1e-12


class MacroParams(NamedTuple):
    a: float
    b: float
    sigma: float
    p: float


class LossBreakdown(NamedTuple):
    total: float
    l_off: float
    l_on: float


class AOpt(NamedTuple):
    a: float
    degenerate: bool  # nothing ever activates; a is then reported as 0


class MCEstimate(NamedTuple):
    mean: float
    stderr: float


def _validate(params: MacroParams) -> None:
    if params.sigma < 0 or not 0 <= params.p <= 1:
        raise ValueError(f"invalid macro parameters {params}")


def relu_moments(mean, std):
    """``(E[ReLU(z)], E[ReLU(z)^2])`` for ``z ~ N(mean, std^2)``, elementwise.

    ``std == 0`` gives the point-mass limit. For negative standardized means
    the Mills-ratio form keeps relative accuracy deep in the tail.
    """
    mean, std = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(std, dtype=float))
    shape = mean.shape
    mean, std = mean.ravel(), std.ravel()
    m1 = np.maximum(mean, 0.0)
    m2 = m1 * m1
    pos = std > 0
    if not np.any(pos):
        return m1.reshape(shape), m2.reshape(shape)
    m, s = mean[pos], std[pos]
    t = m / s
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    neg = t < 0
    # Phi(t)/phi(t) for t < 0, finite where Phi underflows
    mills = _SQRT_HALF_PI * special.erfcx(-t[neg] / math.sqrt(2.0))
    cdf = special.ndtr(t)
    e1 = np.empty_like(t)
    e2 = np.empty_like(t)
    e1[~neg] = m[~neg] * cdf[~neg] + s[~neg] * pdf[~neg]
    e2[~neg] = (m[~neg] ** 2 + s[~neg] ** 2) * cdf[~neg] + m[~neg] * s[~neg] * pdf[~neg]
    tn = t[neg]
    e1[neg] = s[neg] * pdf[neg] * np.maximum(tn * mills + 1.0, 0.0)
    e2[neg] = s[neg] ** 2 * pdf[neg] * np.maximum((1.0 + tn * tn) * mills + tn, 0.0)
    m1[pos] = e1
    m2[pos] = e2
    return m1.reshape(shape), m2.reshape(shape)


@lru_cache(maxsize=8)
def _gauss_legendre(n: int):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def integrate_unit(f, breaks=(), n_nodes: int = DEFAULT_NODES, tol: float = QUAD_TOL,
                   max_panels: int = 4096):
    """Adaptive composite Gauss-Legendre over ``[0, 1]``.

    ``f`` maps an array of ``u`` to an array of shape ``(k, len(u))`` or
    ``(len(u),)``. ``breaks`` are interior points where ``f`` bends sharply.
    A panel is accepted when its ``n_nodes`` rule agrees with the rule on its
    two halves to ``tol * width * max(1, |mean of f on the panel|)``, so the
    test stays meaningful when ``f`` is large. Returns ``(integral, error_estimate)``.
    """
    x, w = _gauss_legendre(n_nodes)
    edges = np.unique(np.clip(np.concatenate(([0.0, 1.0], np.asarray(breaks, float))), 0.0, 1.0))
    stack = [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]

    def rule(lo, hi):
        return np.atleast_2d(f(lo + (hi - lo) * x)) @ w * (hi - lo)

    total, err, panels = 0.0, 0.0, 0
    coarse = {}
    while stack:
        lo, hi = stack.pop()
        whole = coarse.pop((lo, hi), None)
        if whole is None:
            whole = rule(lo, hi)
        mid = 0.5 * (lo + hi)
        left, right = rule(lo, mid), rule(mid, hi)
        fine = left + right
        diff = float(np.max(np.abs(fine - whole)))
        scale = max(1.0, float(np.max(np.abs(fine))) / (hi - lo))
        panels += 1
        if diff <= tol * (hi - lo) * scale or panels >= max_panels or hi - lo < 1e-14:
            total = total + fine
            err += diff
        else:
            coarse[(lo, mid)] = left
            coarse[(mid, hi)] = right
            stack.extend([(lo, mid), (mid, hi)])
    total = np.asarray(total)
    return (total[0] if total.shape == (1,) else total), err


def _kink_breaks(slope: float, offset: float, width: float):
    """Breakpoints around where ``slope * u + offset`` crosses zero."""
    if slope == 0:
        return ()
    u0 = -offset / slope
    w = abs(width / slope)
    if w == 0:
        return (u0,)
    return tuple(u0 + k * w for k in (-8, -4, -2, -1, 0, 1, 2, 4, 8))


def loss_off(params: MacroParams) -> float:
    """``E[ReLU(a nu + b)^2]``."""
    _validate(params)
    _, e2 = relu_moments(params.b, abs(params.a) * params.sigma)
    return float(e2)


def _on_integrand(a, b, s):
    def f(u):
        e1, e2 = relu_moments(a * u + b, s)
        return u * u - 2.0 * u * e1 + e2
    return f


def loss_on(params: MacroParams, n_nodes: int = DEFAULT_NODES, with_error: bool = False):
    """``E_u E_nu[(u - ReLU(a (u + nu) + b))^2]`` with ``u ~ U[0, 1]``."""
    _validate(params)
    a, b = params.a, params.b
    s = abs(a) * params.sigma
    value, err = integrate_unit(_on_integrand(a, b, s), _kink_breaks(a, b, s), n_nodes)
    value = max(float(value), 0.0)
    return (value, err) if with_error else value


def loss_total(params: MacroParams, n_nodes: int = DEFAULT_NODES) -> LossBreakdown:
    off = loss_off(params)
    on = loss_on(params, n_nodes)
    return LossBreakdown((1.0 - params.p) * off + params.p * on, off, on)


def regression_terms(b_hat: float, sigma: float, p: float, n_nodes: int = DEFAULT_NODES):
    """``(E[x y], E[y^2])`` with ``y = ReLU(x + nu + b_hat)``.

    For ``a > 0`` the loss at ``(a, a * b_hat)`` is ``E[x^2] - 2 a E[xy] + a^2 E[y^2]``.
    """
    def f(u):
        e1, e2 = relu_moments(u + b_hat, sigma)
        return np.stack([u * e1, e2])

    (num_on, den_on), _ = integrate_unit(f, _kink_breaks(1.0, b_hat, sigma), n_nodes)
    _, den_off = relu_moments(b_hat, sigma)
    return p * float(num_on), (1.0 - p) * float(den_off) + p * float(den_on)


def a_opt(b_hat: float, sigma: float, p: float, n_nodes: int = DEFAULT_NODES) -> AOpt:
    """Least-squares optimal gain for the bias-per-gain ``b_hat``.

    ``b_hat`` is the bias divided by the gain, so the model output is
    ``a * ReLU(x + nu + b_hat)`` and the optimum is a one-variable regression.
    """
    num, den = regression_terms(b_hat, sigma, p, n_nodes)
    if not den > 0:
        return AOpt(0.0, True)
    return AOpt(max(num / den, 0.0), False)


def _profile_loss(b_hat, sigma, p, n_nodes):
    num, den = regression_terms(b_hat, sigma, p, n_nodes)
    second = p / 3.0
    if not den > 0:
        return second
    return second - num * num / den


def _bias_grid(sigma: float, p: float) -> np.ndarray:
    mean_x = p / 2.0
    lo, hi = -10.0 * sigma - 2.0, 10.0 * sigma + 2.0
    core = np.linspace(lo, hi, 161)
    # large positive b_hat reaches the affine (never-clipping) regime, whose
    # optimum sits near sigma^2 / E[x]
    far = max(hi * 10.0, 10.0 * (sigma * sigma + 1.0) / max(mean_x, 1e-300))
    tail = np.geomspace(hi, far, 48)[1:]
    return np.concatenate([core, tail])


def optimize_macro(sigma: float, p: float, n_nodes: int = DEFAULT_NODES):
    """Global minimum of the reduced loss over gain ``a >= 0`` and bias ``b``.

    The gain is profiled out exactly (it enters quadratically), leaving a
    one-dimensional search over ``b_hat = b / a``: a coarse grid, then bounded
    Brent refinement between the grid neighbours of the best point.
    Returns ``(a, b, LossBreakdown)``.
    """
    if sigma < 0 or not 0 < p <= 1:
        raise ValueError(f"need sigma >= 0 and 0 < p <= 1, got sigma={sigma}, p={p}")
    grid = _bias_grid(sigma, p)
    vals = np.array([_profile_loss(bh, sigma, p, n_nodes) for bh in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    best_bh, best_val = grid[i], vals[i]
    if hi > lo:
        res = optimize.minimize_scalar(
            _profile_loss, bounds=(lo, hi), method="bounded",
            args=(sigma, p, n_nodes), options={"xatol": 1e-12 * max(1.0, abs(best_bh))},
        )
        if res.fun <= best_val:
            best_bh, best_val = float(res.x), float(res.fun)
    gain = a_opt(best_bh, sigma, p, n_nodes)
    a = gain.a
    params = MacroParams(a, a * best_bh, sigma, p)
    return a, a * best_bh, loss_total(params, n_nodes)


def rug_loss_curve(p: float, n_s: int, n_d_list, n_nodes: int = DEFAULT_NODES):
    """Per-feature optimized loss of the bound-saturating model for each ``n_d``."""
    out = []
    for n_d in n_d_list:
        sigma = math.sqrt(sigma_lower_bound(p, n_s, n_d).bound_value)
        _, _, br = optimize_macro(sigma, p, n_nodes)
        out.append((n_d / n_s, br.total))
    return out


def empirical_macro_loss(params: MacroParams, n_samples: int, seed: int = 0,
                         chunk: int = 1_000_000) -> MCEstimate:
    """Monte Carlo estimate of the reduced loss with its standard error."""
    _validate(params)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    a, b, sigma, p = params
    total = total_sq = 0.0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        on = rng.random(n) < p
        x = np.where(on, rng.random(n), 0.0)
        nu = sigma * rng.standard_normal(n)
        err = (x - np.maximum(a * (x + nu) + b, 0.0)) ** 2
        total += err.sum()
        total_sq += np.dot(err, err)
        done += n
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0)
    stderr = math.sqrt(var / (n_samples - 1)) if n_samples > 1 else math.inf
    return MCEstimate(mean, stderr)


def linear_optimal_loss(p: float, n_s: int, n_d: int, per_feature: bool = False) -> float:
    """Loss of the best affine rank-``n_d`` reconstruction of i.i.d. features."""
    if not 0 <= n_d <= n_s:
        raise ValueError(f"need n_d <= n_s, got n_d={n_d}, n_s={n_s}")
    value = (n_s - n_d) * data_moments(p)[2]
    return value / n_s if per_feature else value


def large_sigma_gain(p: float, beta: float) -> float:
    """Leading-order ``a * sigma`` of the optimal gain as ``sigma -> inf``.

    ``beta`` is the bias per gain in units of sigma.
    """
    e1, e2 = relu_moments(beta, 1.0)
    return p * 0.5 * float(e1) / float(e2)


def large_sigma_loss(p: float, beta: float | None = None) -> float:
    """Leading-order loss as ``sigma -> inf`` at standardized bias ``beta``.

    ``p E[u^2] - p^2 E[u]^2 E[ReLU(g + beta)]^2 / E[ReLU(g + beta)^2]`` with
    ``g`` standard normal. The ratio of moments increases to 1 as
    ``beta -> inf``, so ``beta=None`` gives the infimum ``p/3 - p^2/4``.
    """
    if beta is None:
        return p / 3.0 - p * p / 4.0
    e1, e2 = relu_moments(beta, 1.0)
    return p / 3.0 - p * p * 0.25 * float(e1) ** 2 / float(e2)


class ScalingRow(NamedTuple):
    p: float
    loss: float
    ratio: float            # L r / p^2
    log_ratio: float        # L r / (p^2 log(1/p))
    loss_over_p: float
    below_r0_limit: bool    # L < p/3 - p^2/4


def scaling_probe(p_list, r: float, n_nodes: int = DEFAULT_NODES) -> list[ScalingRow]:
    """Optimized loss at the variance bound for each ``p`` at fixed ratio ``r``."""
    if not 0 < r <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {r}")
    rows = []
    for p in p_list:
        sigma = math.sqrt(data_moments(p)[2] * (1.0 / r - 1.0))
        _, _, br = optimize_macro(sigma, p, n_nodes)
        L = br.total
        rows.append(ScalingRow(p, L, L * r / p**2, L * r / (p**2 * math.log(1.0 / p)),
                               L / p, L < large_sigma_loss(p)))
    return rows
