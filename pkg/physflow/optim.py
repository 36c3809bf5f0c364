# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""AdamW with decoupled weight decay, warmup + cosine learning rate, clipping.

Parameters, gradients and moments are dictionaries from parameter name to
numpy array. :func:`adamw_step` never mutates its inputs.
"""

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from physflow.exceptions import InvalidConfiguration, RejectedInput, ShapeMismatch

__all__ = [
    "OptimizerConfig",
    "AdamState",
    "adamw_step",
    "learning_rate",
    "global_norm",
    "clip_grad_norm",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW hyperparameters."""

    lr: float = 4e-5
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.05
    min_lr_ratio: float = 0.0
    schedule: str = "cosine"
    grad_clip: Optional[float] = 1.0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise InvalidConfiguration("optimizer.lr", "must be positive")
        if self.weight_decay < 0:
            raise InvalidConfiguration("optimizer.weight_decay", "must be non-negative")
        for key in ("beta1", "beta2"):
            if not 0 < getattr(self, key) < 1:
                raise InvalidConfiguration(f"optimizer.{key}", "must lie in (0, 1)")
        if not self.eps > 0:
            raise InvalidConfiguration("optimizer.eps", "must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise InvalidConfiguration("optimizer.warmup_fraction", "must lie in [0, 1)")
        if not 0 <= self.min_lr_ratio <= 1:
            raise InvalidConfiguration("optimizer.min_lr_ratio", "must lie in [0, 1]")
        if self.schedule != "cosine":
            raise InvalidConfiguration("optimizer.schedule", "only 'cosine' is supported")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidConfiguration("optimizer.grad_clip", "must be positive or null")


@dataclass
class AdamState:
    """First and second moment estimates per parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: OptimizerConfig,
    step: int,
    lr: Optional[float] = None,
) -> tuple[dict, AdamState]:
    """Apply one AdamW update to every parameter that has a gradient.

    Weight decay is decoupled: each parameter is first scaled by
    ``1 - lr * weight_decay`` and then moved by the bias-corrected adaptive
    step. `lr` overrides ``config.lr`` (the trainer passes the scheduled
    rate). Parameters without an entry in `grads` are returned untouched.
    """
    if step < 1:
        raise RejectedInput(f"adamw step index must be >= 1, got {step}")
    rate = config.lr if lr is None else lr
    beta1, beta2 = config.beta1, config.beta2
    bias1 = 1.0 - beta1**step
    bias2 = 1.0 - beta2**step
    step_size = rate / bias1
    root_bias2 = math.sqrt(bias2)

    new_params = dict(params)
    new_state = AdamState(m=dict(state.m), v=dict(state.v), step=step)
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise ShapeMismatch("adamw_step", param.shape, grad.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        denom = np.sqrt(v) / root_bias2 + config.eps
        updated = param
        if config.weight_decay != 0:
            updated = updated * (1.0 - rate * config.weight_decay)
        new_params[name] = updated - step_size * m / denom
        new_state.m[name] = m
        new_state.v[name] = v
    return new_params, new_state


def learning_rate(step: int, total_steps: int, config: OptimizerConfig) -> float:
    """Linear warmup over ``warmup_fraction`` of the run, then cosine decay.

    The rate decays from ``config.lr`` to ``min_lr_ratio * lr`` at the last
    step. Steps are 1-based.
    """
    peak = config.lr
    floor = config.min_lr_ratio * peak
    warmup = int(config.warmup_fraction * total_steps)
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, max(0.0, (step - warmup) / span))
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Mapping[str, np.ndarray], names: Optional[Iterable[str]] = None) -> float:
    """L2 norm over the concatenation of the selected gradients."""
    keys = grads.keys() if names is None else names
    total = 0.0
    for key in keys:
        g = grads[key]
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_grad_norm(
    grads: Mapping[str, np.ndarray], max_norm: Optional[float]
) -> tuple[dict, float, bool]:
    """Rescale `grads` so their global norm is at most `max_norm`.

    Returns the (possibly) rescaled gradients, the norm before clipping and
    whether clipping happened.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm, False
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm, True
