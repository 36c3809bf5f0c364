# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Finite-difference checks of every differentiable operation and the model."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np

from physflow.header import ScenarioDescriptor
from physflow.model import ModelConfig, ModelParams, attention, forward, parameter_shapes
from physflow.tensor import (
    Tensor,
    concat,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    reshape,
    silu,
    softmax_rows,
    take,
    transpose,
)

__all__ = ["GradCheckResult", "OP_TOLERANCE", "MODEL_TOLERANCE", "check_ops", "check_model", "run_suite"]

logger = logging.getLogger("physflow")

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _op_cases(rng: np.random.Generator) -> list:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    c = rng.standard_normal((4, 5))
    d = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    batched = rng.standard_normal((2, 3, 4))
    indices = np.array([[0, 2], [1, 1], [3, 0]])
    return [
        ("add", lambda x, y: ((x + y) * (x + y)).sum(), [a, b]),
        ("sub", lambda x, y: ((x - y) * x).sum(), [a, b]),
        ("mul", lambda x, y: (x * y * x).sum(), [a, b]),
        ("div", lambda x, y: (x / y).sum(), [a, d]),
        ("matmul", lambda x, y: (matmul(x, y) * matmul(x, y)).sum(), [a, c]),
        ("batched_matmul", lambda x, y: (matmul(x, y) * matmul(x, y)).sum(), [batched, c]),
        ("softmax_rows", lambda x: (softmax_rows(x) * Tensor(c[:3, :4])).sum(), [a]),
        ("layer_norm", lambda x, g, h: (layer_norm(x, g, h) * Tensor(c[:3, :4])).sum(), [a, b, b[::-1].copy()]),
        ("silu", lambda x: (silu(x) * x).sum(), [a]),
        ("gelu", lambda x: (gelu(x) * x).sum(), [a]),
        ("mean", lambda x: (x.mean(axis=0) * x.mean(axis=0)).sum(), [a]),
        ("getitem", lambda x: (x[1:, ::2] * x[:2, 1::2]).sum(), [a]),
        ("take", lambda x: (take(x, indices) * take(x, indices)).sum(), [c]),
        ("concat", lambda x, y: (concat([x, y], axis=0) * concat([y, x], axis=0)).sum(), [a, d]),
        ("reshape_transpose", lambda x: (transpose(reshape(x, (2, 2, 3))) * Tensor(batched[:2, :3, :2])).sum(), [a]),
        (
            "attention",
            lambda q, s, wq, wk, wv, wo: (
                attention(q, s, {"wq": wq, "wk": wk, "wv": wv, "wo": wo, "bo": Tensor(b)}, 2)
                * Tensor(a)
            ).sum(),
            [a, rng.standard_normal((5, 4))] + [rng.standard_normal((4, 4)) for _ in range(4)],
        ),
    ]


def check_ops(seed: int = 0, step: float = 1e-5) -> list[GradCheckResult]:
    """Check each primitive on small random inputs."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in _op_cases(rng):
        error = grad_check(fn, inputs, step=step)
        logger.debug("gradcheck %s: %.3g", name, error)
        results.append(GradCheckResult(name, error, OP_TOLERANCE))
    return results


def check_model(
    seed: int = 0, step: float = 1e-5, names: Optional[Sequence[str]] = None
) -> GradCheckResult:
    """Check the joint loss of a depth-1 dual-branch model.

    The model sees 2 frames of 8x8 pixels in 4x4 patches. Every parameter
    tensor is checked unless `names` picks a subset. Parameters are drawn
    with a wide spread so that zero-initialised heads and cross projections
    do not hide any gradient path.
    """
    from physflow.trainer import joint_loss

    rng = np.random.default_rng(seed)
    config = ModelConfig(d=8, depth=1, heads=2, patch=4, context_vocab=8, max_tokens=16, physics_dim=6)
    arrays = {name: rng.normal(0.0, 0.3, shape) for name, shape, _ in parameter_shapes(config)}
    params = ModelParams(config, arrays)
    frames = 2
    patches = (8 // config.patch) ** 2
    video = rng.standard_normal((1, frames * patches, config.video_dim))
    physics = rng.standard_normal((1, frames, config.physics_dim))
    force = rng.standard_normal((1, frames, 4))
    frame_time = np.full((1, frames), rng.uniform(0.1, 0.9))
    cond_mask = np.array([[True, False]])
    target_v = rng.standard_normal(video.shape)
    target_z = rng.standard_normal(physics.shape)
    contexts = [ScenarioDescriptor(rng.integers(0, 8, 8))]

    for name in params:
        params[name].requires_grad = False

    def loss(*_):
        u_v, u_z = forward(params, video, physics, frame_time, cond_mask, contexts, force)
        total, _, _ = joint_loss(u_v, u_z, target_v, target_z, cond_mask, 0.5)
        return total

    checked = list(params) if names is None else list(names)
    error = grad_check(loss, [params[n] for n in checked], step=step)
    logger.debug("gradcheck model over %d tensors: %.3g", len(checked), error)
    return GradCheckResult("dual_branch_model", error, MODEL_TOLERANCE)


def run_suite(seed: int = 0, step: float = 1e-5) -> list[GradCheckResult]:
    return check_ops(seed, step) + [check_model(seed, step)]
