# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Run configuration.

A run is described by one JSON document of nested sections. Missing keys
take their defaults, unknown keys are rejected, and ``section.key=value``
overrides are applied on top of the file::

    {"train": {"steps": 200}, "model": {"depth": 1}}
"""

import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from physflow.dataset import DatasetDistribution
from physflow.exceptions import InvalidConfiguration
from physflow.model import ModelConfig
from physflow.optim import OptimizerConfig
from physflow.sampler import SamplerConfig
from physflow.trainer import TrainConfig
from physflow.world import WorldConfig

__all__ = [
    "WorldSettings",
    "DataSettings",
    "ModelSettings",
    "OptimizerSettings",
    "ScheduleSettings",
    "TrainSettings",
    "SamplerSettings",
    "EvalSettings",
    "PathSettings",
    "RunConfig",
    "parse_config",
]

logger = logging.getLogger("physflow")


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldSettings(Settings):
    gravity: float = Field(48.0, ge=0)
    restitution: float = Field(0.9, ge=0, le=1)
    dt: float = Field(1.0 / 16.0, gt=0)
    height: int = Field(32, ge=4)
    width: int = Field(32, ge=4)
    frames: int = Field(33, ge=2)
    radius_range: tuple[float, float] = (3.0, 5.0)
    init_x_range: tuple[float, float] = (0.2, 0.8)
    init_y_range: tuple[float, float] = (0.15, 0.5)
    velocity_range: tuple[float, float] = (-24.0, 24.0)
    velocity_cap: Optional[float] = Field(None, gt=0)
    force_cap: float = Field(64.0, gt=0)


class DataSettings(Settings):
    count: int = Field(512, ge=1)
    eval_count: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)
    ball_counts: tuple[int, ...] = Field((1,), min_length=1)
    gravity_off_fraction: float = Field(0.0, ge=0, le=1)
    restitution_range: Optional[tuple[float, float]] = None
    force_fraction: float = Field(0.0, ge=0, le=1)
    force_duration_range: tuple[int, int] = (1, 3)


class ModelSettings(Settings):
    d: int = Field(64, ge=1)
    depth: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    patch: int = Field(8, ge=1)
    cross_depths: Optional[tuple[int, ...]] = None
    context_vocab: int = Field(32, ge=8)
    max_tokens: int = Field(1024, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    seed: int = Field(0, ge=0)


class OptimizerSettings(Settings):
    lr: float = Field(4e-5, gt=0)
    weight_decay: float = Field(1e-3, ge=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    warmup_fraction: float = Field(0.05, ge=0, lt=1)
    min_lr_ratio: float = Field(0.0, ge=0, le=1)
    grad_clip: Optional[float] = Field(1.0, gt=0)


class ScheduleSettings(Settings):
    alpha_max: float = Field(1.0, gt=0)
    ramp_steps: int = Field(500, ge=1)
    eta_z: float = Field(1.0, gt=0)


class TrainSettings(Settings):
    batch_size: int = Field(16, ge=1)
    steps: int = Field(5000, ge=1)
    freeze_video: bool = False
    seed: int = Field(0, ge=0)
    eval_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)
    k_max: Optional[int] = Field(None, ge=0)
    regime: Literal["joint", "pretrain_then_freeze"] = "joint"
    pretrain_steps: int = Field(1000, ge=0)


class SamplerSettings(Settings):
    steps: int = Field(50, ge=1)
    method: Literal["euler", "heun"] = "euler"
    cond_frames: int = Field(0, ge=0)
    count: int = Field(4, ge=1)
    seed: int = Field(0, ge=0)


class EvalSettings(Settings):
    tau: float = Field(0.05, gt=0, lt=1)
    sequences: int = Field(64, ge=1)
    perturbation: float = Field(0.01, gt=0)
    settings: tuple[Literal["none", "single", "multi"], ...] = ("single", "multi")
    k_max: Optional[int] = Field(None, ge=1)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


class PathSettings(Settings):
    run_dir: str = "runs/default"
    dataset: str = "runs/default/train.phnt"
    eval_dataset: str = "runs/default/eval.phnt"
    checkpoint: str = "runs/default/model.phck"
    loss_log: str = "runs/default/loss.csv"
    metrics: str = "runs/default/metrics.csv"
    samples: str = "runs/default/samples"


class RunConfig(Settings):
    world: WorldSettings = WorldSettings()
    data: DataSettings = DataSettings()
    model: ModelSettings = ModelSettings()
    optimizer: OptimizerSettings = OptimizerSettings()
    schedule: ScheduleSettings = ScheduleSettings()
    train: TrainSettings = TrainSettings()
    sampler: SamplerSettings = SamplerSettings()
    eval: EvalSettings = EvalSettings()
    paths: PathSettings = PathSettings()

    def dump(self) -> str:
        """Indented JSON with sorted keys; it parses back to an equal config."""
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def to_world_config(self, seed: Optional[int] = None) -> WorldConfig:
        w = self.world
        return WorldConfig(
            gravity=w.gravity,
            restitution=w.restitution,
            dt=w.dt,
            height=w.height,
            width=w.width,
            ball_count=max(self.data.ball_counts),
            radius_range=w.radius_range,
            init_x_range=w.init_x_range,
            init_y_range=w.init_y_range,
            velocity_range=w.velocity_range,
            velocity_cap=w.velocity_cap,
            force_cap=w.force_cap,
            seed=self.data.seed if seed is None else seed,
        )

    def to_distribution(self) -> DatasetDistribution:
        d = self.data
        return DatasetDistribution(
            ball_counts=d.ball_counts,
            gravity_off_fraction=d.gravity_off_fraction,
            restitution_range=d.restitution_range,
            force_fraction=d.force_fraction,
            force_duration_range=d.force_duration_range,
        )

    def to_model_config(self) -> ModelConfig:
        m = self.model
        config = ModelConfig(
            d=m.d,
            depth=m.depth,
            heads=m.heads,
            patch=m.patch,
            cross_depths=m.cross_depths,
            context_vocab=m.context_vocab,
            max_tokens=m.max_tokens,
            physics_dim=self.to_world_config().latent_dim,
            mlp_ratio=m.mlp_ratio,
        )
        config.check_frame(self.world.height, self.world.width)
        return config

    def to_optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.optimizer.model_dump())

    def to_train_config(self) -> TrainConfig:
        t, s = self.train, self.schedule
        return TrainConfig(
            batch_size=t.batch_size,
            steps=t.steps,
            optimizer=self.to_optimizer_config(),
            alpha_max=s.alpha_max,
            ramp_steps=s.ramp_steps,
            eta_z=s.eta_z,
            freeze_video=t.freeze_video,
            seed=t.seed,
            eval_every=t.eval_every,
            log_every=t.log_every,
            k_max=t.k_max,
        )

    def to_sampler_config(self) -> SamplerConfig:
        return SamplerConfig(steps=self.sampler.steps, method=self.sampler.method)


def _set_path(data: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise InvalidConfiguration(key, f"{part} is not a section")
        node = child
    node[parts[-1]] = value


def _decode(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def parse_config(
    path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    """Read the JSON file at `path` (if any) and apply ``key=value`` overrides.

    Override values are decoded as JSON when possible and otherwise kept as
    strings. Every problem is reported as :class:`InvalidConfiguration`
    naming the dotted key.
    """
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as ex:
            raise InvalidConfiguration(str(path), "cannot be read") from ex
        if text.strip():
            try:
                data = json.loads(text)
            except ValueError as ex:
                raise InvalidConfiguration(str(path), f"invalid JSON: {ex}") from ex
            if not isinstance(data, dict):
                raise InvalidConfiguration(str(path), "top level must be an object")

    for override in overrides:
        key, sep, raw = override.partition("=")
        if not sep or not key:
            raise InvalidConfiguration(override, "overrides take the form section.key=value")
        _set_path(data, key.strip(), _decode(raw))

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as ex:
        error = ex.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        raise InvalidConfiguration(key, error["msg"]) from ex
    logger.debug("resolved configuration:\n%s", config.dump())
    return config
