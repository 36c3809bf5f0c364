# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Conditional flow matching on the linear path.

Time runs from ``t = 0`` (clean data ``x1``) to ``t = 1`` (Gaussian noise
``x0``)::

    x_t = (1 - t) * x1 + t * x0        u = x1 - x0

Sampling therefore integrates from ``t = 1`` down to ``t = 0`` and adds
``dt * u`` at each step. Conditioning frames sit at ``t = 0`` and keep their
clean values throughout.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

import numpy as np

from physflow.dataset import SceneRecord
from physflow.exceptions import EmptyBatch, NumericAbort, RejectedInput, ShapeMismatch
from physflow.header import ScenarioDescriptor
from physflow.model import patchify
from physflow.tensor import Tensor
from physflow.world import PhysicsEncoder, encode_force

__all__ = [
    "sample_path",
    "target_velocity",
    "FlowSample",
    "FlowBatch",
    "Conditioning",
    "draw_cond_frames",
    "make_training_batch",
    "integrate",
]

logger = logging.getLogger("physflow")

Array = Union[np.ndarray, Tensor]


def _shape(x: Array) -> tuple:
    return x.shape if isinstance(x, Tensor) else np.shape(x)


def _check_shapes(op: str, x1: Array, x0: Array) -> None:
    if _shape(x1) != _shape(x0):
        raise ShapeMismatch(op, _shape(x1), _shape(x0))


def sample_path(x1: Array, x0: Array, t: Union[float, np.ndarray]) -> Array:
    """Point of the linear path at time `t`; `t` may broadcast per token."""
    _check_shapes("sample_path", x1, x0)
    if isinstance(x1, Tensor) or isinstance(x0, Tensor):
        x1 = x1 if isinstance(x1, Tensor) else Tensor(x1)
        x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
        return x1 * (1.0 - np.asarray(t)) + x0 * np.asarray(t)
    return (1.0 - t) * x1 + t * x0


def target_velocity(x1: Array, x0: Array) -> Array:
    """Conditional velocity ``x1 - x0``; it does not depend on time."""
    _check_shapes("target_velocity", x1, x0)
    return x1 - x0


@dataclass
class FlowSample:
    """One noised training item.

    Video arrays have one row per patch token, ``T * P`` rows in frame
    order; physics arrays have one row per frame. `frame_time` and
    `cond_mask` are per frame.
    """

    video: np.ndarray
    physics: np.ndarray
    target_video: np.ndarray
    target_physics: np.ndarray
    clean_video: np.ndarray
    clean_physics: np.ndarray
    frame_time: np.ndarray
    cond_mask: np.ndarray
    context: ScenarioDescriptor
    force: np.ndarray
    t: float = 0.0
    cond_frames: int = 0

    @property
    def patches_per_frame(self) -> int:
        return self.video.shape[0] // self.frame_time.shape[0]

    @property
    def video_mask(self) -> np.ndarray:
        return np.repeat(self.cond_mask, self.patches_per_frame)


@dataclass
class FlowBatch:
    """Samples stacked along a leading batch axis."""

    video: np.ndarray
    physics: np.ndarray
    target_video: np.ndarray
    target_physics: np.ndarray
    clean_video: np.ndarray
    clean_physics: np.ndarray
    frame_time: np.ndarray
    cond_mask: np.ndarray
    contexts: list[ScenarioDescriptor]
    force: np.ndarray
    t: np.ndarray
    cond_frames: np.ndarray

    @classmethod
    def stack(cls, samples: Sequence[FlowSample]) -> "FlowBatch":
        if not samples:
            raise EmptyBatch
        return cls(
            video=np.stack([s.video for s in samples]),
            physics=np.stack([s.physics for s in samples]),
            target_video=np.stack([s.target_video for s in samples]),
            target_physics=np.stack([s.target_physics for s in samples]),
            clean_video=np.stack([s.clean_video for s in samples]),
            clean_physics=np.stack([s.clean_physics for s in samples]),
            frame_time=np.stack([s.frame_time for s in samples]),
            cond_mask=np.stack([s.cond_mask for s in samples]),
            contexts=[s.context for s in samples],
            force=np.stack([s.force for s in samples]),
            t=np.array([s.t for s in samples]),
            cond_frames=np.array([s.cond_frames for s in samples]),
        )

    def __len__(self) -> int:
        return self.video.shape[0]

    def __getitem__(self, i: int) -> FlowSample:
        return FlowSample(
            video=self.video[i],
            physics=self.physics[i],
            target_video=self.target_video[i],
            target_physics=self.target_physics[i],
            clean_video=self.clean_video[i],
            clean_physics=self.clean_physics[i],
            frame_time=self.frame_time[i],
            cond_mask=self.cond_mask[i],
            context=self.contexts[i],
            force=self.force[i],
            t=float(self.t[i]),
            cond_frames=int(self.cond_frames[i]),
        )

    @property
    def video_mask(self) -> np.ndarray:
        per_frame = self.video.shape[1] // self.cond_mask.shape[1]
        return np.repeat(self.cond_mask, per_frame, axis=1)


def draw_cond_frames(rng: np.random.Generator, frames: int, k_max: Optional[int] = None) -> int:
    """No conditioning half of the time, otherwise ``1..k_max`` frames."""
    if k_max is None:
        k_max = max(1, frames // 3)
    k_max = min(k_max, frames - 1)
    if k_max < 1 or rng.random() < 0.5:
        return 0
    return int(rng.integers(1, k_max + 1))


def _noised(
    clean: np.ndarray, noise: np.ndarray, row_time: np.ndarray, cond_rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    noisy = sample_path(clean, noise, row_time[:, None])
    noisy[cond_rows] = clean[cond_rows]
    target = target_velocity(clean, noise)
    target[cond_rows] = 0.0
    return noisy, target


def make_training_batch(
    records: Sequence[SceneRecord],
    rng: np.random.Generator,
    patch: int,
    encoder: PhysicsEncoder,
    k_max: Optional[int] = None,
    cond_frames: Optional[Union[int, Sequence[int]]] = None,
) -> FlowBatch:
    """Noise `records` into a batch of flow-matching samples.

    Each record draws its conditioning-frame count ``k`` (unless
    `cond_frames` fixes it), one shared ``t ~ U(0, 1)`` for its future
    frames and independent standard-normal noise for the video and physics
    latents, in that order.
    """
    if not records:
        raise EmptyBatch
    if isinstance(cond_frames, int):
        cond_frames = [cond_frames] * len(records)
    samples = []
    for i, record in enumerate(records):
        frames = record.length
        if cond_frames is None:
            k = draw_cond_frames(rng, frames, k_max)
        else:
            k = int(cond_frames[i])
        if not 0 <= k < frames:
            raise RejectedInput(f"conditioning frames must lie in [0, {frames}), got {k}")
        t = float(rng.random())
        clean_video = patchify(record.frames, patch)
        clean_physics = encoder.encode(record.states)
        noise_video = rng.standard_normal(clean_video.shape)
        noise_physics = rng.standard_normal(clean_physics.shape)

        cond_mask = np.zeros(frames, dtype=bool)
        cond_mask[:k] = True
        frame_time = np.where(cond_mask, 0.0, t)
        per_frame = clean_video.shape[0] // frames
        video, target_video = _noised(
            clean_video,
            noise_video,
            np.repeat(frame_time, per_frame),
            np.repeat(cond_mask, per_frame),
        )
        physics, target_physics = _noised(clean_physics, noise_physics, frame_time, cond_mask)
        samples.append(
            FlowSample(
                video=video,
                physics=physics,
                target_video=target_video,
                target_physics=target_physics,
                clean_video=clean_video,
                clean_physics=clean_physics,
                frame_time=frame_time,
                cond_mask=cond_mask,
                context=record.descriptor,
                force=encode_force(record.force_frames, frames),
                t=t,
                cond_frames=k,
            )
        )
    return FlowBatch.stack(samples)


@dataclass
class Conditioning:
    """Clean values held fixed during integration.

    Rows where the mask is true are overwritten with the clean values
    before every velocity evaluation and after every step.
    """

    video: np.ndarray
    physics: np.ndarray
    video_mask: np.ndarray
    physics_mask: np.ndarray

    @classmethod
    def empty(cls, video: np.ndarray, physics: np.ndarray) -> "Conditioning":
        return cls(
            video=np.zeros_like(video),
            physics=np.zeros_like(physics),
            video_mask=np.zeros(video.shape[:-1], dtype=bool),
            physics_mask=np.zeros(physics.shape[:-1], dtype=bool),
        )

    def impose(self, video: np.ndarray, physics: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.where(self.video_mask[..., None], self.video, video),
            np.where(self.physics_mask[..., None], self.physics, physics),
        )


VelocityFn = Callable[[np.ndarray, np.ndarray, float, Conditioning, Any], tuple[np.ndarray, np.ndarray]]


def integrate(
    velocity_fn: VelocityFn,
    init_video: np.ndarray,
    init_physics: np.ndarray,
    cond: Optional[Conditioning] = None,
    steps: int = 50,
    method: str = "euler",
    context: Any = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the velocity field from noise at ``t = 1`` to data at ``t = 0``.

    `velocity_fn` is called as ``velocity_fn(video, physics, t, cond,
    context)`` and returns the two velocity arrays. ``method`` is ``"euler"``
    or ``"heun"``; both use ``steps`` uniform steps of ``1 / steps``.
    """
    if steps < 1:
        raise RejectedInput(f"integrate needs at least one step, got {steps}")
    if method not in ("euler", "heun"):
        raise RejectedInput(f"unknown integration method {method!r}")
    if cond is None:
        cond = Conditioning.empty(init_video, init_physics)
    dt = 1.0 / steps
    video, physics = cond.impose(np.array(init_video, dtype=np.float64), np.array(init_physics, dtype=np.float64))
    for i in range(steps):
        t = 1.0 - i * dt
        u_v, u_z = velocity_fn(video, physics, t, cond, context)
        if method == "euler":
            video = video + dt * u_v
            physics = physics + dt * u_z
        else:
            pred_v, pred_z = cond.impose(video + dt * u_v, physics + dt * u_z)
            _check_finite(pred_v, pred_z, i)
            w_v, w_z = velocity_fn(pred_v, pred_z, t - dt, cond, context)
            video = video + 0.5 * dt * (u_v + w_v)
            physics = physics + 0.5 * dt * (u_z + w_z)
        video, physics = cond.impose(video, physics)
        _check_finite(video, physics, i)
        logger.debug("integrate step %d/%d at t=%.4f", i + 1, steps, t)
    return video, physics


def _check_finite(video: np.ndarray, physics: np.ndarray, step: int) -> None:
    if not (np.all(np.isfinite(video)) and np.all(np.isfinite(physics))):
        logger.error("non-finite state during integration at step %d", step)
        raise NumericAbort(step, "integrate")
