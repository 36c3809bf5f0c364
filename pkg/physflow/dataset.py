# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Scene records and seeded dataset generation."""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from physflow.exceptions import InvalidWorldConfig, RejectedInput, UnwritablePath
from physflow.header import ContainerHeader, ScenarioDescriptor
from physflow.world import (
    ForceEvent,
    PhysStateSeq,
    WorldConfig,
    render,
    render_force_tensor,
    simulate,
)

__all__ = [
    "DatasetDistribution",
    "SceneRecord",
    "record_world",
    "generate_record",
    "make_dataset",
]

logger = logging.getLogger("physflow")

PROGRESS_EVERY = 64


@dataclass(frozen=True)
class DatasetDistribution:
    """How scenarios vary across the records of a dataset."""

    ball_counts: tuple[int, ...] = (1,)
    gravity_off_fraction: float = 0.0
    restitution_range: Optional[tuple[float, float]] = None
    force_fraction: float = 0.0
    force_duration_range: tuple[int, int] = (1, 3)

    def __post_init__(self) -> None:
        if not self.ball_counts or min(self.ball_counts) < 1:
            raise InvalidWorldConfig("data.ball_counts", "needs at least one count >= 1")
        if not 0 <= self.gravity_off_fraction <= 1:
            raise InvalidWorldConfig("data.gravity_off_fraction", "must lie in [0, 1]")
        if not 0 <= self.force_fraction <= 1:
            raise InvalidWorldConfig("data.force_fraction", "must lie in [0, 1]")
        if self.restitution_range is not None:
            lo, hi = self.restitution_range
            if not 0 <= lo <= hi <= 1:
                raise InvalidWorldConfig("data.restitution_range", "must be a sub-range of [0, 1]")
        lo, hi = self.force_duration_range
        if not 1 <= lo <= hi:
            raise InvalidWorldConfig("data.force_duration_range", "must satisfy 1 <= low <= high")

    @property
    def slots(self) -> int:
        return max(self.ball_counts)


@dataclass
class SceneRecord:
    """One clip: rendered frames, states, descriptor and optional force."""

    descriptor: ScenarioDescriptor
    frames: np.ndarray
    states: PhysStateSeq
    force: Optional[ForceEvent] = None
    force_frames: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def _scenario_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def record_world(
    world: WorldConfig, distribution: DatasetDistribution, seed: int
) -> WorldConfig:
    """World settings for the record drawn with `seed`."""
    rng = _scenario_rng(seed, 1)
    ball_count = int(rng.choice(distribution.ball_counts))
    gravity = 0.0 if rng.random() < distribution.gravity_off_fraction else world.gravity
    restitution = world.restitution
    if distribution.restitution_range is not None:
        restitution = float(rng.uniform(*distribution.restitution_range))
    return replace(
        world,
        seed=seed,
        ball_count=ball_count,
        slots=distribution.slots,
        gravity=gravity,
        restitution=restitution,
        velocity_cap=world.cap,
        initial=None,
    )


def _draw_force(
    config: WorldConfig,
    distribution: DatasetDistribution,
    frames: int,
    rng: np.random.Generator,
) -> Optional[ForceEvent]:
    """Force aimed inside one of the balls at its apply frame."""
    apply_frame = int(rng.integers(1, max(2, frames // 2)))
    lookahead = simulate(config, None, max(2, apply_frame + 1))
    balls = lookahead.balls[apply_frame]
    active = [k for k in range(config.slots) if balls[k, 5] >= 0.5]
    if not active:
        return None
    k = int(rng.choice(active))
    offset = rng.uniform(0.0, 0.5) * balls[k, 4]
    heading = rng.uniform(0.0, 2.0 * math.pi)
    return ForceEvent(
        apply_frame=apply_frame,
        coordx=float(balls[k, 0] + offset * math.cos(heading)),
        coordy=float(balls[k, 1] + offset * math.sin(heading)),
        magnitude=float(rng.uniform(0.25, 1.0) * config.force_cap),
        angle=float(rng.uniform(0.0, 360.0)),
        duration=int(rng.integers(distribution.force_duration_range[0], distribution.force_duration_range[1] + 1)),
    )


def generate_record(
    world: WorldConfig,
    distribution: DatasetDistribution,
    frames: int,
    index: int,
    seed: int,
) -> tuple[SceneRecord, WorldConfig]:
    """Build record `index`; its seed is ``seed ^ index``.

    Returns the record and the world settings that produced it, which the
    evaluator needs to rerun ground truth.
    """
    record_seed = seed ^ index
    config = record_world(world, distribution, record_seed)
    rng = _scenario_rng(record_seed, 2)
    force = None
    if rng.random() < distribution.force_fraction:
        force = _draw_force(config, distribution, frames, rng)
    states = simulate(config, force, frames)
    rendered = render(states, config.height, config.width)
    descriptor = ScenarioDescriptor.describe(
        config.ball_count,
        config.gravity,
        config.restitution,
        force,
        height=config.height,
        width=config.width,
        force_cap=config.force_cap,
    )
    force_frames = None
    if descriptor.force_present:
        force_frames = render_force_tensor(
            force, frames, config.height, config.width, config.force_cap
        )
    record = SceneRecord(
        descriptor=descriptor,
        frames=rendered,
        states=states,
        force=force,
        force_frames=force_frames,
    )
    return record, config


def make_dataset(
    path: Union[str, Path],
    world: WorldConfig,
    count: int,
    frames: int,
    distribution: Optional[DatasetDistribution] = None,
    seed: int = 0,
    start: int = 0,
) -> ContainerHeader:
    """Write `count` generated records to `path`.

    Record ``i`` is generated with index ``start + i``, so a held-out split
    can share the seed of the training split. The file is byte-identical for
    identical arguments.
    """
    from physflow.writer import DatasetWriter

    if count < 1:
        raise RejectedInput(f"dataset needs at least one record, got {count}")
    distribution = distribution or DatasetDistribution(ball_counts=(world.ball_count,))
    header = ContainerHeader(
        count=count,
        frames=frames,
        height=world.height,
        width=world.width,
        slots=distribution.slots,
        latent_dim=6 * distribution.slots,
        velocity_cap=world.cap,
        force_cap=world.force_cap,
    )
    header.force_channel = distribution.force_fraction > 0
    try:
        handle = open(path, "wb")
    except OSError as ex:
        raise UnwritablePath(path) from ex
    writer = DatasetWriter(handle, header)
    try:
        for i in range(count):
            record, _ = generate_record(world, distribution, frames, start + i, seed)
            writer.write(record)
            if (i + 1) % PROGRESS_EVERY == 0:
                logger.info("wrote %d/%d records to %s", i + 1, count, path)
    finally:
        writer.close()
    logger.info("dataset %s: %d records of %d frames", path, count, frames)
    return header
