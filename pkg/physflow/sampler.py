# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Generate clips with a trained model, optionally from conditioning frames."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from physflow.dataset import SceneRecord
from physflow.exceptions import EmptyBatch, InvalidConfiguration, RejectedInput
from physflow.flow import Conditioning, integrate
from physflow.model import ModelParams, patchify, predict, unpatchify
from physflow.world import PhysicsEncoder, PhysStateSeq, encode_force

__all__ = ["SamplerConfig", "SampleResult", "sample"]

logger = logging.getLogger("physflow")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    method: str = "euler"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise InvalidConfiguration("sampler.steps", "must be at least 1")
        if self.method not in ("euler", "heun"):
            raise InvalidConfiguration("sampler.method", "must be 'euler' or 'heun'")


@dataclass
class SampleResult:
    """Generated frames ``(T, H, W)``, physics latents and decoded states."""

    frames: np.ndarray
    latents: np.ndarray
    states: PhysStateSeq
    cond_frames: int


def sample(
    params: ModelParams,
    records: Sequence[SceneRecord],
    encoder: PhysicsEncoder,
    rng: np.random.Generator,
    cond_frames: int = 0,
    config: SamplerConfig = SamplerConfig(),
) -> list[SampleResult]:
    """Denoise one clip per record from Gaussian noise.

    The first `cond_frames` frames and physics latents of each record are
    held at their clean values, so they come back unchanged. Records only
    contribute their conditioning prefix, scenario descriptor and force.
    """
    if not records:
        raise EmptyBatch
    frames, height, width = records[0].frames.shape
    if not 0 <= cond_frames < frames:
        raise RejectedInput(f"conditioning frames must lie in [0, {frames}), got {cond_frames}")
    patch = params.config.patch
    clean_video = np.stack([patchify(r.frames, patch) for r in records])
    clean_physics = np.stack([encoder.encode(r.states) for r in records])
    force = np.stack([encode_force(r.force_frames, frames) for r in records])
    contexts = [r.descriptor for r in records]

    cond_mask = np.zeros((len(records), frames), dtype=bool)
    cond_mask[:, :cond_frames] = True
    per_frame = clean_video.shape[1] // frames
    cond = Conditioning(
        video=clean_video,
        physics=clean_physics,
        video_mask=np.repeat(cond_mask, per_frame, axis=1),
        physics_mask=cond_mask,
    )
    noise_video = rng.standard_normal(clean_video.shape)
    noise_physics = rng.standard_normal(clean_physics.shape)

    def velocity(video, physics, t, cond, context):
        frame_time = np.full(cond_mask.shape, t)
        return predict(params, video, physics, frame_time, cond_mask, contexts, force)

    logger.info(
        "sampling %d clips with %d conditioning frames (%s, %d steps)",
        len(records),
        cond_frames,
        config.method,
        config.steps,
    )
    video, physics = integrate(
        velocity, noise_video, noise_physics, cond, steps=config.steps, method=config.method
    )
    results = []
    for i in range(len(records)):
        generated = unpatchify(video[i], frames, height, width, patch)
        results.append(
            SampleResult(
                frames=np.clip(generated, 0.0, 1.0),
                latents=physics[i],
                states=encoder.decode(physics[i]),
                cond_frames=cond_frames,
            )
        )
    return results
