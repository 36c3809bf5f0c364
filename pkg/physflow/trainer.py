# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Joint flow-matching training.

The total loss is ``L_v + alpha_z * L_z``. The physics weight ``alpha_z``
ramps linearly from zero and falls back to zero whenever the gradient norm
of the physics side (physics branch plus cross attention) exceeds
``eta_z``; the weight used at step ``k + 1`` is the schedule state after
observing the norm of step ``k``.
"""

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from physflow.dataset import SceneRecord
from physflow.exceptions import (
    AllConditioningBatch,
    EmptyBatch,
    InvalidConfiguration,
    MissingGradients,
    NonFiniteValue,
    NumericAbort,
    RejectedInput,
    ShapeMismatch,
)
from physflow.flow import make_training_batch
from physflow.model import Checkpoint, ModelConfig, ModelParams, forward, init_model
from physflow.optim import AdamState, OptimizerConfig, adamw_step, clip_grad_norm, learning_rate
from physflow.tensor import Graph, Tensor
from physflow.world import PhysicsEncoder

__all__ = [
    "ScheduleState",
    "schedule_step",
    "schedule_trace",
    "LossRecord",
    "joint_loss",
    "grad_norm_physics",
    "physics_names",
    "TrainConfig",
    "TrainResult",
    "train_loop",
    "pretrain_then_freeze",
    "ablate",
]

logger = logging.getLogger("physflow")

PHYSICS_PARTITIONS = ("physics", "cross")


@dataclass(frozen=True)
class ScheduleState:
    """Physics loss weight and the bookkeeping of its resets."""

    alpha_z: float = 0.0
    alpha_max: float = 1.0
    ramp_steps: int = 500
    eta_z: float = 1.0
    last_reset_step: int = 0
    reset_count: int = 0

    def __post_init__(self) -> None:
        if not self.alpha_max > 0:
            raise InvalidConfiguration("schedule.alpha_max", "must be positive")
        if self.ramp_steps < 1:
            raise InvalidConfiguration("schedule.ramp_steps", "must be at least 1")
        if not self.eta_z > 0:
            raise InvalidConfiguration("schedule.eta_z", "must be positive")


def schedule_step(state: ScheduleState, grad_norm_z: float, step: int) -> ScheduleState:
    """Advance the schedule after observing `grad_norm_z` at `step`."""
    if grad_norm_z > state.eta_z:
        return replace(
            state, alpha_z=0.0, last_reset_step=step, reset_count=state.reset_count + 1
        )
    ramp = min(1.0, (step - state.last_reset_step) / state.ramp_steps)
    return replace(state, alpha_z=state.alpha_max * ramp)


def schedule_trace(
    norms: Sequence[float], state: Optional[ScheduleState] = None
) -> list[ScheduleState]:
    """Schedule states after each of the steps ``1..len(norms)``."""
    state = state or ScheduleState()
    trace = []
    for step, norm in enumerate(norms, start=1):
        state = schedule_step(state, float(norm), step)
        trace.append(state)
    return trace


@dataclass
class LossRecord:
    """One training log row.

    ``alpha_z`` and ``reset_count`` are the values in force while step
    ``step`` ran, so ``L_total == L_v + alpha_z * L_z`` holds in every row.
    A trip at step k shows as ``grad_norm_z > eta_z`` in row k and as
    ``alpha_z == 0`` with the incremented ``reset_count`` from row k + 1.
    """

    step: int
    L_v: float
    L_z: float
    L_total: float
    alpha_z: float
    grad_norm_z: float
    reset_count: int = 0
    lr: float = 0.0
    clipped: bool = False


def _as_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _masked_mse(pred: Tensor, target: np.ndarray, keep: np.ndarray) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatch("joint_loss", pred.shape, target.shape)
    weights = np.broadcast_to(keep[..., None], pred.shape).astype(np.float64)
    count = weights.sum()
    diff = pred - np.where(weights > 0, target, 0.0)
    return (diff * diff * weights).sum() * (1.0 / count)


def joint_loss(
    u_v_pred: Union[Tensor, np.ndarray],
    u_z_pred: Union[Tensor, np.ndarray],
    u_v_target: np.ndarray,
    u_z_target: np.ndarray,
    cond_mask: np.ndarray,
    alpha_z: float,
) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(L_total, L_v, L_z)`` as scalar tensors.

    Both terms are mean squared errors over the elements of
    non-conditioning tokens; conditioning targets never enter the loss.
    `cond_mask` is per frame, shape ``(B, T)``.
    """
    u_v_pred = _as_tensor(u_v_pred)
    u_z_pred = _as_tensor(u_z_pred)
    cond_mask = np.asarray(cond_mask, dtype=bool)
    keep_z = ~cond_mask
    if not keep_z.any():
        raise AllConditioningBatch
    frames = cond_mask.shape[1]
    if u_v_pred.shape[1] % frames:
        raise ShapeMismatch("joint_loss", u_v_pred.shape, cond_mask.shape)
    keep_v = np.repeat(keep_z, u_v_pred.shape[1] // frames, axis=1)
    loss_v = _masked_mse(u_v_pred, np.asarray(u_v_target, dtype=np.float64), keep_v)
    loss_z = _masked_mse(u_z_pred, np.asarray(u_z_target, dtype=np.float64), keep_z)
    return loss_v + loss_z * float(alpha_z), loss_v, loss_z


def physics_names(params: ModelParams) -> list[str]:
    """Trainable parameters whose gradients drive the schedule."""
    return [n for n in params.trainable_names() if params.partition(n) in PHYSICS_PARTITIONS]


def grad_norm_physics(grads: Mapping[str, Optional[np.ndarray]], names: Iterable[str]) -> float:
    """Global L2 norm of the gradients of `names`, before clipping."""
    names = list(names)
    missing = [n for n in names if grads.get(n) is None]
    if missing:
        raise MissingGradients(missing)
    total = 0.0
    for name in names:
        g = grads[name]
        total += float(np.sum(g * g))
    return math.sqrt(total)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 5000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    alpha_max: float = 1.0
    ramp_steps: int = 500
    eta_z: float = 1.0
    freeze_video: bool = False
    seed: int = 0
    eval_every: int = 500
    log_every: int = 50
    k_max: Optional[int] = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise InvalidConfiguration("train.steps", "must be at least 1")
        if self.batch_size < 1:
            raise InvalidConfiguration("train.batch_size", "must be at least 1")
        if self.eval_every < 1:
            raise InvalidConfiguration("train.eval_every", "must be at least 1")
        if self.log_every < 1:
            raise InvalidConfiguration("train.log_every", "must be at least 1")
        if self.k_max is not None and self.k_max < 0:
            raise InvalidConfiguration("train.k_max", "must be non-negative")

    def initial_schedule(self) -> ScheduleState:
        return ScheduleState(alpha_max=self.alpha_max, ramp_steps=self.ramp_steps, eta_z=self.eta_z)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[LossRecord]


def _save(path: Optional[Union[str, Path]], checkpoint: Checkpoint) -> None:
    if path is None:
        return
    from physflow.writer import save_checkpoint

    save_checkpoint(path, checkpoint)
    logger.info("checkpoint at step %d written to %s", checkpoint.step, path)


def train_loop(
    records: Sequence[SceneRecord],
    params: ModelParams,
    config: TrainConfig,
    encoder: PhysicsEncoder,
    fixed_alpha: Optional[float] = None,
    log_writer=None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    step_offset: int = 0,
) -> TrainResult:
    """Train `params` in place for ``config.steps`` steps.

    Frozen partitions of `params` receive no update; ``freeze_video``
    additionally freezes the video branch and the shared time/context
    embeddings. `fixed_alpha` pins the physics weight (the video-only
    pretraining phase uses 0). Every step is logged to `log_writer`, with
    the logged step number shifted by `step_offset`. The run is a
    function of ``config.seed`` alone.
    """
    if not records:
        raise EmptyBatch
    if config.freeze_video:
        params.freeze("video", "shared")
    trainable = params.trainable_names()
    watched = physics_names(params)
    for name in params:
        params[name].requires_grad = name in trainable
    leaves = [params[n] for n in trainable]

    rng = np.random.default_rng(config.seed)
    optimizer = AdamState()
    schedule = config.initial_schedule()
    history: list[LossRecord] = []
    logger.info(
        "training %d of %d parameters for %d steps (frozen: %s)",
        sum(params[n].size for n in trainable),
        params.count(),
        config.steps,
        ", ".join(sorted(params.frozen)) or "none",
    )

    for step in range(1, config.steps + 1):
        alpha = schedule.alpha_z if fixed_alpha is None else float(fixed_alpha)
        chosen = rng.integers(0, len(records), size=config.batch_size)
        batch = make_training_batch(
            [records[i] for i in chosen], rng, params.config.patch, encoder, k_max=config.k_max
        )
        try:
            with Graph() as graph:
                u_v, u_z = forward(
                    params,
                    batch.video,
                    batch.physics,
                    batch.frame_time,
                    batch.cond_mask,
                    batch.contexts,
                    batch.force,
                )
                total, loss_v, loss_z = joint_loss(
                    u_v, u_z, batch.target_video, batch.target_physics, batch.cond_mask, alpha
                )
            graph.backward(total, leaves=leaves)
        except NonFiniteValue as ex:
            logger.error("non-finite value in %s at step %d", ex.where, step)
            raise NumericAbort(step, ex.where) from ex

        grads = {n: params[n].grad for n in trainable}
        grad_norm_z = grad_norm_physics(grads, watched)
        grads, grad_norm, clipped = clip_grad_norm(grads, config.optimizer.grad_clip)
        if not math.isfinite(grad_norm):
            logger.error("non-finite gradient norm at step %d", step)
            raise NumericAbort(step, "gradients")
        if clipped:
            logger.debug("step %d: gradient norm %.4g clipped", step, grad_norm)

        lr = learning_rate(step, config.steps, config.optimizer)
        arrays = {n: params[n].data for n in trainable}
        updated, optimizer = adamw_step(arrays, grads, optimizer, config.optimizer, step, lr)
        if not all(np.all(np.isfinite(updated[n])) for n in trainable):
            logger.error("non-finite parameters after update at step %d", step)
            raise NumericAbort(step, "update")
        params.load({n: updated[n] for n in trainable})

        record = LossRecord(
            step=step + step_offset,
            L_v=loss_v.item(),
            L_z=loss_z.item(),
            L_total=total.item(),
            alpha_z=alpha,
            grad_norm_z=grad_norm_z,
            reset_count=schedule.reset_count,
            lr=lr,
            clipped=clipped,
        )
        history.append(record)
        if log_writer is not None:
            log_writer.write(record)
        logger.debug(
            "step %d L_v %.6f L_z %.6f alpha_z %.4f", record.step, record.L_v, record.L_z, alpha
        )
        if step % config.log_every == 0:
            logger.info(
                "step %d L_v %.6f L_z %.6f alpha_z %.4f grad_norm_z %.4g lr %.3g",
                record.step,
                record.L_v,
                record.L_z,
                alpha,
                grad_norm_z,
                lr,
            )

        if fixed_alpha is None:
            resets = schedule.reset_count
            schedule = schedule_step(schedule, grad_norm_z, step)
            if schedule.reset_count > resets:
                logger.info(
                    "step %d: physics gradient norm %.4g above %.4g, alpha_z reset",
                    record.step,
                    grad_norm_z,
                    schedule.eta_z,
                )

        if step % config.eval_every == 0 and step < config.steps:
            _save(checkpoint_path, _checkpoint(params, optimizer, schedule, step))

    final = _checkpoint(params, optimizer, schedule, config.steps)
    _save(checkpoint_path, final)
    return TrainResult(checkpoint=final, records=history)


def _checkpoint(
    params: ModelParams, optimizer: AdamState, schedule: ScheduleState, step: int
) -> Checkpoint:
    return Checkpoint.from_params(
        params, optimizer=optimizer.copy(), schedule=asdict(schedule), step=step
    )


def pretrain_then_freeze(
    records: Sequence[SceneRecord],
    params: ModelParams,
    config: TrainConfig,
    encoder: PhysicsEncoder,
    pretrain_steps: int,
    log_writer=None,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Video-only pretraining followed by training with the video side frozen.

    The first phase freezes the physics branch and cross attention and pins
    ``alpha_z`` at zero. The second phase unfreezes them and freezes the
    video branch and shared embeddings. Log steps run on across phases.

    Raises :class:`RejectedInput` unless ``pretrain_steps >= 1``.
    """
    if pretrain_steps < 1:
        raise RejectedInput(f"pretrain_steps must be >= 1, got {pretrain_steps}")
    physics_frozen = {p for p in PHYSICS_PARTITIONS if p in params.frozen}
    params.freeze(*PHYSICS_PARTITIONS)
    logger.info("pretraining the video branch for %d steps", pretrain_steps)
    train_loop(
        records,
        params,
        replace(config, steps=pretrain_steps, freeze_video=False),
        encoder,
        fixed_alpha=0.0,
        log_writer=log_writer,
    )
    params.unfreeze(*(set(PHYSICS_PARTITIONS) - physics_frozen))
    logger.info("training the physics side for %d steps", config.steps)
    return train_loop(
        records,
        params,
        replace(config, freeze_video=True),
        encoder,
        log_writer=log_writer,
        checkpoint_path=checkpoint_path,
        step_offset=pretrain_steps,
    )


def ablate(
    records: Sequence[SceneRecord],
    model_config: ModelConfig,
    config: TrainConfig,
    encoder: PhysicsEncoder,
    pretrain_steps: int,
    seed: int = 0,
) -> dict[str, TrainResult]:
    """Train the dual-branch model and its zero-coupling twin.

    Both start from one video-pretrained model initialised with `seed`; the
    twin has every cross-attention weight zeroed and frozen. Returns the
    results under ``"dual"`` and ``"zero_coupling"``. The video branch is
    frozen in both, so ``pretrain_steps`` below 1 raises
    :class:`RejectedInput`.
    """
    if pretrain_steps < 1:
        raise RejectedInput(f"ablation needs pretrain_steps >= 1, got {pretrain_steps}")
    base = init_model(model_config, seed)
    base.freeze(*PHYSICS_PARTITIONS)
    logger.info("ablation: pretraining the shared video branch for %d steps", pretrain_steps)
    pretrain = replace(config, steps=pretrain_steps, freeze_video=False)
    train_loop(records, base, pretrain, encoder, fixed_alpha=0.0)
    base.unfreeze(*PHYSICS_PARTITIONS)

    dual = base.copy()
    twin = base.copy()
    twin.zero_cross()
    twin.freeze("cross")
    frozen_video = replace(config, freeze_video=True)
    logger.info("ablation: training the dual-branch model")
    results = {"dual": train_loop(records, dual, frozen_video, encoder)}
    logger.info("ablation: training the zero-coupling model")
    results["zero_coupling"] = train_loop(records, twin, frozen_video, encoder)
    return results
