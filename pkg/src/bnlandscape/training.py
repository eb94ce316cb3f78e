"""Gradient descent drivers: simultaneous, sequential ("adjusted") and reduced-lr."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .networks import Batch, Dataset, NetworkState
from .tensor_core import NonFiniteError, Rng

__all__ = [
    "MODES",
    "TrainConfig",
    "GradientSnapshot",
    "TrainTrace",
    "step_simultaneous",
    "step_adjusted",
    "train",
]

MODES = ("simultaneous", "adjusted", "reduced_lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    steps: int
    batch_size: int | None = None  # None means full batch
    mode: str = "simultaneous"
    seed: int = 0
    hook_every: int = 1
    diverge_above: float = 1e12
    compress: bool = True  # use the exact moment-matched batch when valid

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be finite and non-negative")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 or None")
        if self.hook_every < 1:
            raise ValueError("hook_every must be >= 1")


@dataclass
class GradientSnapshot:
    step: int
    layers: list[np.ndarray]  # one flattened gradient per parameter group
    names: list[list[str]] = field(default_factory=list)

    @classmethod
    def from_grads(cls, step: int, groups: list[list[str]], grads: dict) -> "GradientSnapshot":
        flat = [np.concatenate([grads[n].ravel() for n in grp]) for grp in groups]
        return cls(step, flat, [list(grp) for grp in groups])


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    snapshots: list[GradientSnapshot] = field(default_factory=list)
    diverged: bool = False
    diverge_step: int | None = None
    diverge_reason: str = ""
    grad_evals: int = 0
    net: NetworkState | None = None

    @property
    def steps(self) -> int:
        return len(self.losses)


class Divergence(Exception):
    def __init__(self, loss: float, reason: str):
        super().__init__(reason)
        self.loss = loss
        self.reason = reason


def _update(params: dict, grads: dict, lr: float, names) -> dict:
    out = dict(params)
    for n in names:
        out[n] = params[n] - lr * grads[n]
    return out


def step_simultaneous(net: NetworkState, batch: Batch, lr: float, step: int = 0,
                      snapshot: bool = True):
    """One plain GD step on all parameters: ``(new_net, snapshot, loss)``.

    With ``snapshot=False`` the snapshot slot is None.
    """
    loss, grads = net.model.evaluate(net.params, batch, step, net.noise_seed)
    snap = GradientSnapshot.from_grads(step, net.groups, grads) if snapshot else None
    return net.with_params(_update(net.params, grads, lr, grads)), snap, loss


def step_adjusted(net: NetworkState, batch: Batch, lr: float, step: int = 0):
    """Sequential GD: update groups input-to-output, each with a fresh gradient.

    Returns ``(new_net, loss)`` where ``loss`` is taken before any update.
    Each group costs one gradient evaluation; the forward pass restarts at
    the group changed last, which gives the same values as a full pass.
    """
    model = net.model
    params = dict(net.params)
    loss0 = None
    for i, group in enumerate(net.groups):
        loss, grads = model.evaluate(params, batch, step, net.noise_seed,
                                     from_group=max(i - 1, 0), grads_from_group=i)
        if i == 0:
            loss0 = loss
        for n in group:
            params[n] = params[n] - lr * grads[n]
    return net.with_params(params), loss0


def _batches(data: Dataset, cfg: TrainConfig, model_closed: bool):
    if cfg.batch_size is None or cfg.batch_size >= data.X.shape[0]:
        if cfg.compress and model_closed and data.linear_targets:
            full = data.moment_batch()
        else:
            full = data.full_batch()
        while True:
            yield full
    n = data.X.shape[0]
    rng = Rng(cfg.seed).split("shuffle")
    epoch = 0
    while True:
        order = rng.split(epoch).permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            yield Batch(data.X[idx], data.T[idx])
        epoch += 1


def train(net: NetworkState, data: Dataset, cfg: TrainConfig,
          hooks: Sequence[Callable] = ()) -> TrainTrace:
    """Run ``cfg.steps`` steps; stop early and flag on divergence.

    Every ``cfg.hook_every`` steps each hook is called as
    ``hook(step, net, batch, lr)`` before that step's update, and (for
    simultaneous steps) a gradient snapshot is kept.  Without hooks there are
    no hook steps and no snapshots.  The input
    ``net`` is never modified; the final state is ``trace.net``.
    """
    trace = TrainTrace(net=net)
    groups = net.groups
    lr = cfg.lr / len(groups) if cfg.mode == "reduced_lr" else cfg.lr
    batches = _batches(data, cfg, net.model.moment_closed)
    for t in range(cfg.steps):
        batch = next(batches)
        hook_step = bool(hooks) and t % cfg.hook_every == 0
        try:
            if hook_step:
                for hook in hooks:
                    hook(t, net, batch, lr)
            if cfg.mode == "adjusted":
                new_net, loss = step_adjusted(net, batch, lr, t)
                trace.grad_evals += len(groups)
            else:
                new_net, snap, loss = step_simultaneous(net, batch, lr, t, hook_step)
                trace.grad_evals += 1
                if hook_step:
                    trace.snapshots.append(snap)
            if not np.isfinite(loss) or loss > cfg.diverge_above:
                raise Divergence(loss, f"loss {loss:.3g} above {cfg.diverge_above:.3g}")
        except NonFiniteError as exc:
            trace.diverged, trace.diverge_step, trace.diverge_reason = True, t, str(exc)
            break
        except Divergence as exc:
            trace.diverged, trace.diverge_step, trace.diverge_reason = True, t, exc.reason
            break
        trace.losses.append(loss)
        net = new_net
    trace.net = net
    return trace
