"""Measurements taken during training: gradient shift between layers,
landscape probes along the gradient, and per-unit activation moments.

All functions are evaluation-only; the network passed in is never changed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .networks import Batch, NetworkState
from .tensor_core import NonFiniteError, colsum

__all__ = [
    "IcsRecord",
    "ProbeReport",
    "ActivationMomentRecord",
    "dln_multipliers",
    "mlp_multipliers",
    "ics_pair",
    "measure_ics",
    "probe_direction",
    "probe_landscape",
    "capture_activation_moments",
    "IcsHook",
    "ProbeHook",
    "MomentHook",
]


@dataclass
class IcsRecord:
    step: int
    layer: int  # 1 = closest to the input
    l2_diff: float
    cos_angle: float | None  # None when either gradient is zero


@dataclass
class ProbeReport:
    step: int
    lr: float
    base_loss: float
    grad_norm: float
    multipliers: list[float]
    losses: list[float]  # nan where the probed point was non-finite
    grad_l2_diffs: list[float]
    effective_beta: float

    @property
    def finite_losses(self) -> list[float]:
        return [x for x in self.losses if math.isfinite(x)]

    @property
    def loss_min(self) -> float:
        return min(self.finite_losses, default=math.nan)

    @property
    def loss_max(self) -> float:
        return max(self.finite_losses, default=math.nan)

    @property
    def loss_median(self) -> float:
        f = self.finite_losses
        return float(np.median(f)) if f else math.nan


@dataclass
class ActivationMomentRecord:
    step: int
    layer: int  # 1-based position in the layer list
    unit: int
    mean: float
    variance: float


def dln_multipliers(count: int = 20) -> list[float]:
    return list(np.logspace(np.log10(1 / 100), np.log10(30), count))


def mlp_multipliers(count: int = 8) -> list[float]:
    return list(np.linspace(0.5, 4.0, count))


def ics_pair(g: np.ndarray, g_shift: np.ndarray) -> tuple[float, float | None]:
    """``(||g - g'||, cos(g, g'))``; the cosine is None if either is zero."""
    if np.array_equal(g, g_shift):
        return 0.0, (1.0 if np.any(g) else None)
    l2 = float(np.linalg.norm(g - g_shift))
    na, nb = np.linalg.norm(g), np.linalg.norm(g_shift)
    if na == 0 or nb == 0:
        return l2, None
    return l2, float(np.clip(np.dot(g, g_shift) / (na * nb), -1.0, 1.0))


def _flat(grads, group):
    return np.concatenate([grads[n].ravel() for n in group])


def measure_ics(net: NetworkState, batch: Batch, lr: float, step: int = 0) -> list[IcsRecord]:
    """Gradient shift of every layer caused by updating the layers before it.

    For layer ``i`` compare its gradient at the current parameters with its
    gradient after layers ``1..i-1`` took their plain GD step of size ``lr``
    (same batch, same noise draw).
    """
    model = net.model
    groups = net.groups
    _, grads = model.evaluate(net.params, batch, step, net.noise_seed)
    params = dict(net.params)
    out = []
    for i, group in enumerate(groups):
        if i == 0:
            shifted = grads
        else:
            for n in groups[i - 1]:
                params[n] = net.params[n] - lr * grads[n]
            _, shifted = model.evaluate(params, batch, step, net.noise_seed,
                                        from_group=i - 1, grads_from_group=i)
        l2, cos = ics_pair(_flat(grads, group), _flat(shifted, group))
        out.append(IcsRecord(step, i + 1, l2, cos))
    return out


def probe_direction(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], theta: np.ndarray,
                    lr: float, multipliers: Sequence[float], step: int = 0) -> ProbeReport:
    """Probe ``fun`` (returning loss and gradient) along the negative gradient.

    Point ``a`` is ``theta - a * lr * g``.  A point whose evaluation is not
    finite gets nan entries and is left out of ``effective_beta``.
    """
    mults = [float(a) for a in multipliers]
    if any(a <= 0 for a in mults) or mults != sorted(mults):
        raise ValueError("multipliers must be positive and sorted")
    base, g = fun(theta)
    gnorm = float(np.linalg.norm(g))
    losses, diffs = [], []
    beta = 0.0
    for a in mults:
        try:
            loss, g_new = fun(theta - (a * lr) * g)
            if not (math.isfinite(loss) and np.isfinite(g_new).all()):
                raise NonFiniteError("non-finite probe")
        except (NonFiniteError, FloatingPointError):
            losses.append(math.nan)
            diffs.append(math.nan)
            continue
        diff = float(np.linalg.norm(g_new - g))
        losses.append(float(loss))
        diffs.append(diff)
        dist = a * lr * gnorm
        if dist > 0:
            beta = max(beta, diff / dist)
    return ProbeReport(step, lr, float(base), gnorm, mults, losses, diffs, beta)


def probe_landscape(net: NetworkState, batch: Batch, lr: float,
                    multipliers: Sequence[float] | None = None, step: int = 0) -> ProbeReport:
    if multipliers is None:
        multipliers = dln_multipliers() if net.loss == "mse" else mlp_multipliers()
    model = net.model
    names = model.param_names

    def fun(theta):
        loss, grads = model.evaluate(net.unflatten(theta), batch, step, net.noise_seed)
        return loss, np.concatenate([grads[n].ravel() for n in names])

    return probe_direction(fun, net.flat_params(), lr, multipliers, step)


def capture_activation_moments(net: NetworkState, batch: Batch, layer: int,
                               units: Sequence[int], step: int = 0) -> list[ActivationMomentRecord]:
    """Batch mean and population variance of chosen units after layer ``layer`` (1-based)."""
    if not 1 <= layer <= len(net.layers):
        raise IndexError(f"layer {layer} outside 1..{len(net.layers)}")
    net.model.evaluate(net.params, batch, step, net.noise_seed, grads=False)
    H = net.model.layer_output(layer - 1)
    m = H.shape[0]
    mean = colsum(H) / m
    c = H - mean
    var = colsum(c * c) / m
    out = []
    for u in units:
        if not 0 <= u < H.shape[1]:
            raise IndexError(f"unit {u} outside 0..{H.shape[1] - 1}")
        out.append(ActivationMomentRecord(step, layer, int(u), float(mean[u]), float(var[u])))
    return out


@dataclass
class IcsHook:
    every: int = 1
    records: list[IcsRecord] = field(default_factory=list)

    def __call__(self, step, net, batch, lr):
        if step % self.every == 0:
            self.records.extend(measure_ics(net, batch, lr, step))


@dataclass
class ProbeHook:
    every: int = 1
    multipliers: Sequence[float] | None = None
    reports: list[ProbeReport] = field(default_factory=list)

    def __call__(self, step, net, batch, lr):
        if step % self.every == 0:
            self.reports.append(probe_landscape(net, batch, lr, self.multipliers, step))


@dataclass
class MomentHook:
    layer: int
    units: Sequence[int]
    every: int = 1
    records: list[ActivationMomentRecord] = field(default_factory=list)

    def __call__(self, step, net, batch, lr):
        if step % self.every == 0:
            self.records.extend(capture_activation_moments(net, batch, self.layer, self.units, step))
