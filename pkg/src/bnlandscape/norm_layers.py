"""BatchNorm, "noisy" BatchNorm and l_p normalization (train mode only).

All functions take an ``m x d`` batch (rows are samples, columns are units)
and normalize each column over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Graph, Node, Rng, ShapeError, colsum, register_op

__all__ = [
    "BatchNormParams",
    "BNCache",
    "NoiseConfig",
    "LpNormConfig",
    "LpCache",
    "bn_forward",
    "bn_backward",
    "bn_input_jacobian",
    "bn_composite",
    "noise_arrays",
    "noisy_bn_apply",
    "lp_norm_forward",
    "lp_norm_backward",
    "lp_norm_composite",
]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if self.gamma.shape != self.beta.shape:
            raise ShapeError("gamma and beta must have one entry per unit")
        if not np.isfinite(self.gamma).all():
            raise ValueError("gamma must be finite")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @classmethod
    def identity(cls, units: int, eps: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(units), np.zeros(units), eps)


@dataclass
class BNCache:
    mu: np.ndarray
    sigma: np.ndarray
    y_hat: np.ndarray


@dataclass
class NoiseConfig:
    """Per-step noise added after normalization.

    Each step draws, per unit, a mean ``U(-n_mu, n_mu)`` and a scale
    ``U(1, n_sigma)``; each sample then gets an additive term
    ``U(mean - r_mu, mean + r_mu)`` and a multiplicative term
    ``Normal(scale, r_sigma)`` (``r_sigma`` is a standard deviation).
    """

    n_mu: float = 0.5
    n_sigma: float = 1.25
    r_mu: float = 0.1
    r_sigma: float = 0.1

    def __post_init__(self):
        if self.n_sigma < 1:
            raise ValueError("n_sigma must be >= 1")
        if min(self.n_mu, self.r_mu, self.r_sigma) < 0:
            raise ValueError("n_mu, r_mu and r_sigma must be >= 0")


@dataclass
class LpNormConfig:
    p: float
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    eps: float = 1e-5

    def __post_init__(self):
        if self.p not in (1, 2, np.inf):
            raise ValueError(f"p must be 1, 2 or inf, got {self.p}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")


@dataclass
class LpCache:
    mu: np.ndarray
    nu: np.ndarray
    scale: np.ndarray  # gamma / (nu + eps)
    y: np.ndarray = field(repr=False)
    argmax: np.ndarray | None = None
    abs_y: np.ndarray | None = field(default=None, repr=False)


def _check_batch(Y, name):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ShapeError(f"{name}: expected an m x d batch, got shape {Y.shape}")
    if Y.shape[0] < 2:
        raise ValueError(f"{name}: needs at least 2 samples, got {Y.shape[0]}")
    return Y


def _bn_arrays(Y, gamma, beta, eps):
    Y = _check_batch(Y, "bn_forward")
    if gamma.shape != (Y.shape[1],):
        raise ShapeError(f"bn_forward: {gamma.shape[0]} gammas for {Y.shape[1]} units")
    m = Y.shape[0]
    mu = colsum(Y) / m
    centered = Y - mu
    var = colsum(centered * centered) / m
    sigma = np.sqrt(var + eps)
    if (sigma == 0).any():
        raise ValueError("bn_forward: zero batch variance with eps=0")
    y_hat = centered / sigma
    return gamma * y_hat + beta, BNCache(mu, sigma, y_hat)


def bn_forward(Y, params: BatchNormParams):
    """Standardize each unit with population batch statistics, then scale and shift."""
    return _bn_arrays(Y, params.gamma, params.beta, params.eps)


def _bn_backward_arrays(cache: BNCache, gamma, dZ):
    m = cache.y_hat.shape[0]
    sum_dz = colsum(dZ)
    sum_dz_yhat = colsum(dZ * cache.y_hat)
    dY = (gamma / (m * cache.sigma)) * (m * dZ - sum_dz - cache.y_hat * sum_dz_yhat)
    return dY, sum_dz_yhat, sum_dz


def bn_backward(cache: BNCache, params: BatchNormParams, dZ):
    """Closed-form gradient through BatchNorm.

    Returns ``(dY, dGamma, dBeta)``.
    """
    dZ = np.asarray(dZ, dtype=np.float64)
    if dZ.shape != cache.y_hat.shape:
        raise ShapeError(f"bn_backward: dZ {dZ.shape} vs cached batch {cache.y_hat.shape}")
    return _bn_backward_arrays(cache, params.gamma, dZ)


def bn_input_jacobian(cache: BNCache, params: BatchNormParams, max_m: int = 64) -> np.ndarray:
    """Explicit per-unit Jacobians ``J[j, b, k] = dz_j^(b) / dy_j^(k)``.

    Shape ``(d, m, m)``.
    """
    m, d = cache.y_hat.shape
    if m > max_m:
        raise ValueError(f"bn_input_jacobian: m={m} exceeds the limit {max_m}")
    eye = np.eye(m)
    yh = cache.y_hat.T  # d x m
    inner = eye[None] - 1.0 / m - yh[:, :, None] * yh[:, None, :] / m
    return (params.gamma / cache.sigma)[:, None, None] * inner


def _bn_op_f(at, y, gamma, beta):
    return _bn_arrays(y, gamma, beta, at["eps"])


def _bn_op_b(at, g, v, cache, needs, y, gamma, beta):
    dY, dgamma, dbeta = _bn_backward_arrays(cache, gamma, g)
    return (dY if needs[0] else None, dgamma if needs[1] else None, dbeta if needs[2] else None)


register_op("batchnorm", _bn_op_f, _bn_op_b)


def bn_composite(g: Graph, y: Node, gamma: Node, beta: Node, eps: float = 0.0) -> Node:
    """BatchNorm spelled out in primitive graph ops (no closed-form backward)."""
    mu = g.apply("mean_rows", y)
    centered = y - g.apply("expand_rows", mu, y)
    var = g.apply("mean_rows", g.apply("square", centered))
    if eps:
        var = g.apply("add_const", var, c=eps)
    sigma = g.apply("sqrt", var)
    y_hat = centered / g.apply("expand_rows", sigma, y)
    return y_hat * g.apply("expand_rows", gamma, y) + g.apply("expand_rows", beta, y)


# -- noise ----------------------------------------------------------------------

def noise_arrays(cfg: NoiseConfig, rng: Rng, t: int, shape, layer: int = 0):
    """Multiplicative and additive noise for one normalization layer at step ``t``.

    Unit-level distribution parameters are drawn before any per-sample draw,
    from a stream keyed on ``(layer, t)`` only.
    """
    m, d = shape
    gen = rng.split("noise", layer, t)
    mean_t = gen.uniform(-cfg.n_mu, cfg.n_mu, size=d)
    scale_t = gen.uniform(1.0, cfg.n_sigma, size=d)
    add = gen.uniform(mean_t - cfg.r_mu, mean_t + cfg.r_mu, size=(m, d))
    mult = gen.normal(scale_t, cfg.r_sigma, size=(m, d))
    return mult, add


def noisy_bn_apply(Z, cfg: NoiseConfig, rng: Rng, t: int, layer: int = 0) -> np.ndarray:
    """Perturb an already batch-normalized activation matrix ``Z``."""
    Z = np.asarray(Z, dtype=np.float64)
    mult, add = noise_arrays(cfg, rng, t, Z.shape, layer)
    return mult * Z + add


# -- l_p normalization ------------------------------------------------------------

def _lp_arrays(Y, gamma, beta, p, eps):
    Y = _check_batch(Y, "lp_norm_forward")
    m, d = Y.shape
    mu = colsum(Y) / m
    argmax = abs_y = None
    if p == 1:
        abs_y = np.abs(Y)
        nu = colsum(abs_y) / m
    elif p == 2:
        nu = np.sqrt(colsum(Y * Y) / m)
    else:
        absy = np.abs(Y)
        argmax = np.argmax(absy, axis=0)
        nu = absy[argmax, np.arange(d)]
    denom = nu + eps
    if (denom == 0).any():
        raise ValueError("lp_norm_forward: zero l_p norm with eps=0")
    scale = gamma / denom
    # (Y - mu) * scale + beta; the diag matmul beats a broadcast multiply here
    Z = Y @ np.diag(scale)
    Z += beta - mu * scale
    return Z, LpCache(mu, nu, scale, Y, argmax, abs_y), m


def lp_norm_forward(Y, cfg: LpNormConfig):
    """Subtract the batch mean, divide by the batch power-mean of |y| (raw, pre-shift)."""
    Y = np.asarray(Y, dtype=np.float64)
    d = Y.shape[1] if Y.ndim == 2 else 0
    gamma = np.ones(d) if cfg.gamma is None else np.asarray(cfg.gamma, dtype=np.float64)
    beta = np.zeros(d) if cfg.beta is None else np.asarray(cfg.beta, dtype=np.float64)
    Z, cache, _ = _lp_arrays(Y, gamma, beta, cfg.p, cfg.eps)
    return Z, cache


def _lp_backward_arrays(cache: LpCache, gamma, p, eps, dZ):
    Y = cache.y
    m, d = Y.shape
    denom = cache.nu + eps
    dbeta = colsum(dZ)
    dz_c = colsum(dZ * Y) - cache.mu * dbeta
    dgamma = dz_c / denom
    d_nu = -(gamma * dz_c) / denom**2
    dY = dZ @ np.diag(cache.scale)
    shift = cache.scale * dbeta / m
    if p == 1:
        abs_y = np.abs(Y) if cache.abs_y is None else cache.abs_y
        # Y / |Y| is a cheaper sign() here; exact zeros fall back to sign()
        sign = np.sign(Y) if abs_y.min() == 0 else Y / abs_y
        dY += sign @ np.diag(d_nu / m)
    elif p == 2:
        dY += Y @ np.diag(d_nu / (m * cache.nu))
    else:
        cols = np.arange(d)
        rows = cache.argmax
        dY[rows, cols] += d_nu * np.sign(Y[rows, cols])
    dY -= shift
    return dY, dgamma, dbeta


def lp_norm_backward(cache: LpCache, cfg: LpNormConfig, dZ):
    """Gradient of :func:`lp_norm_forward`; returns ``(dY, dGamma, dBeta)``."""
    d = cache.y.shape[1]
    gamma = np.ones(d) if cfg.gamma is None else np.asarray(cfg.gamma, dtype=np.float64)
    return _lp_backward_arrays(cache, gamma, cfg.p, cfg.eps, np.asarray(dZ, dtype=np.float64))


def _lp_op_f(at, y, gamma, beta):
    Z, cache, _ = _lp_arrays(y, gamma, beta, at["p"], at["eps"])
    return Z, cache


def _lp_op_b(at, g, v, cache, needs, y, gamma, beta):
    dY, dgamma, dbeta = _lp_backward_arrays(cache, gamma, at["p"], at["eps"], g)
    return (dY if needs[0] else None, dgamma if needs[1] else None, dbeta if needs[2] else None)


register_op("lpnorm", _lp_op_f, _lp_op_b)


def lp_norm_composite(g: Graph, y: Node, gamma: Node, beta: Node, p, eps: float = 0.0) -> Node:
    """l_p normalization spelled out in primitive graph ops."""
    if p == 1:
        nu = g.apply("mean_rows", g.apply("abs", y))
    elif p == 2:
        nu = g.apply("sqrt", g.apply("mean_rows", g.apply("square", y)))
    else:
        nu = g.apply("max_rows", g.apply("abs", y))
    if eps:
        nu = g.apply("add_const", nu, c=eps)
    centered = y - g.apply("expand_rows", g.apply("mean_rows", y), y)
    y_hat = centered / g.apply("expand_rows", nu, y)
    return y_hat * g.apply("expand_rows", gamma, y) + g.apply("expand_rows", beta, y)
