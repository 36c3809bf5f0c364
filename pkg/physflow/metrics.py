# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Motion-mask video metrics and simulator-oracle physics metrics.

Video metrics compare binary motion masks (frame differences above
``tau``) of a generated clip against ground truth, plus pixel MSE. A
Physics-IQ style score normalises them by a ceiling: the same metrics
measured between two ground-truth runs whose initial velocities differ by
one percent. Only frames after the conditioning prefix are compared.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from physflow.constants import CEILING_FLOOR
from physflow.exceptions import RejectedInput, ShapeMismatch
from physflow.world import (
    ACTIVE,
    RADIUS,
    VX,
    VY,
    X,
    Y,
    BallState,
    ForceEvent,
    PhysStateSeq,
    WorldConfig,
    initial_state,
    render,
    simulate,
)

__all__ = [
    "MetricsRecord",
    "motion_mask",
    "spatial_iou",
    "spatiotemporal_iou",
    "weighted_spatial_iou",
    "mse",
    "physics_iq_score",
    "first_contact",
    "bounce_timing_error",
    "trajectory_rmse",
    "video_metrics",
    "perturbed_world",
    "ceiling_metrics",
    "evaluate_sequence",
    "summarize",
    "compare_runs",
]

logger = logging.getLogger("physflow")


@dataclass
class MetricsRecord:
    spatial_iou: float = 0.0
    spatiotemporal_iou: float = 0.0
    weighted_spatial_iou: float = 0.0
    mse: float = 0.0
    physics_iq: float = 0.0
    bounce_timing_error: float = 0.0
    trajectory_rmse: float = 0.0

    def as_row(self, sequence, setting: str) -> dict:
        row = {"sequence": sequence, "setting": setting}
        row.update(asdict(self))
        return row


def motion_mask(frames: np.ndarray, tau: float = 0.05) -> np.ndarray:
    """Boolean ``(T-1, H, W)`` masks of pixels changing by more than `tau`."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise RejectedInput(f"motion masks need at least two frames, got shape {frames.shape}")
    if not 0 < tau < 1:
        raise RejectedInput(f"tau must lie in (0, 1), got {tau}")
    return np.abs(np.diff(frames, axis=0)) > tau


def _check(op: str, gen: np.ndarray, ref: np.ndarray) -> None:
    if np.shape(gen) != np.shape(ref):
        raise ShapeMismatch(op, np.shape(gen), np.shape(ref))


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def spatial_iou(gen: np.ndarray, ref: np.ndarray) -> float:
    """IoU of the masks united over time; 1 when both unions are empty."""
    _check("spatial_iou", gen, ref)
    return _iou(np.any(gen, axis=0), np.any(ref, axis=0))


def spatiotemporal_iou(gen: np.ndarray, ref: np.ndarray) -> float:
    _check("spatiotemporal_iou", gen, ref)
    return float(np.mean([_iou(g, r) for g, r in zip(gen, ref)]))


def weighted_spatial_iou(gen: np.ndarray, ref: np.ndarray) -> float:
    """Ratio of summed min to summed max of per-pixel motion frequencies."""
    _check("weighted_spatial_iou", gen, ref)
    a = np.mean(np.asarray(gen, dtype=np.float64), axis=0)
    b = np.mean(np.asarray(ref, dtype=np.float64), axis=0)
    top = np.maximum(a, b).sum()
    if top == 0:
        return 1.0
    return float(np.minimum(a, b).sum() / top)


def mse(gen: np.ndarray, ref: np.ndarray) -> float:
    _check("mse", gen, ref)
    diff = np.asarray(gen, dtype=np.float64) - np.asarray(ref, dtype=np.float64)
    return float(np.mean(diff * diff))


def physics_iq_score(m: MetricsRecord, ceiling: MetricsRecord) -> float:
    """Ceiling-normalised mean of the three IoUs and MSE, scaled to 0..100.

    An IoU component is ``m / ceiling`` and the MSE component is
    ``ceiling / max(m, ceiling)``; ceilings are floored at 1e-6 and every
    component is clamped to [0, 1].
    """
    components = []
    for name in ("spatial_iou", "spatiotemporal_iou", "weighted_spatial_iou"):
        value, top = getattr(m, name), getattr(ceiling, name)
        if value >= top:
            components.append(1.0)
        else:
            components.append(min(1.0, max(0.0, value / max(top, CEILING_FLOOR))))
    floor = max(ceiling.mse, CEILING_FLOOR)
    components.append(min(1.0, max(0.0, floor / max(m.mse, floor))))
    return 100.0 * float(np.mean(components))


def first_contact(states: PhysStateSeq, height: int) -> Optional[int]:
    """First frame where an active ball touches the floor, if any."""
    balls = states.balls
    touching = (balls[..., ACTIVE] >= 0.5) & (balls[..., Y] + balls[..., RADIUS] >= height - 1)
    frames = np.flatnonzero(touching.any(axis=1))
    return int(frames[0]) if frames.size else None


def bounce_timing_error(decoded: PhysStateSeq, gt: PhysStateSeq, height: int) -> int:
    """Frames between first floor contacts; ``T`` if only one run touches."""
    if decoded.frames != gt.frames:
        raise ShapeMismatch("bounce_timing_error", decoded.balls.shape, gt.balls.shape)
    a, b = first_contact(decoded, height), first_contact(gt, height)
    if a is None and b is None:
        return 0
    if a is None or b is None:
        return gt.frames
    return abs(a - b)


def trajectory_rmse(decoded: PhysStateSeq, gt: PhysStateSeq) -> float:
    """Root-mean-square centre distance over frames and balls active in `gt`."""
    if decoded.balls.shape != gt.balls.shape:
        raise ShapeMismatch("trajectory_rmse", decoded.balls.shape, gt.balls.shape)
    active = gt.balls[..., ACTIVE] >= 0.5
    if not active.any():
        return 0.0
    dx = decoded.balls[..., X] - gt.balls[..., X]
    dy = decoded.balls[..., Y] - gt.balls[..., Y]
    return float(np.sqrt(np.mean((dx * dx + dy * dy)[active])))


def video_metrics(
    gen: np.ndarray, ref: np.ndarray, cond_frames: int = 0, tau: float = 0.05
) -> MetricsRecord:
    """Mask IoUs and MSE over the frames after the conditioning prefix.

    Masks start at the last conditioning frame so the first generated
    transition counts; MSE covers generated frames only.
    """
    _check("video_metrics", gen, ref)
    start = max(0, cond_frames - 1)
    gen_masks = motion_mask(gen[start:], tau)
    ref_masks = motion_mask(ref[start:], tau)
    return MetricsRecord(
        spatial_iou=spatial_iou(gen_masks, ref_masks),
        spatiotemporal_iou=spatiotemporal_iou(gen_masks, ref_masks),
        weighted_spatial_iou=weighted_spatial_iou(gen_masks, ref_masks),
        mse=mse(gen[cond_frames:], ref[cond_frames:]),
    )


def perturbed_world(config: WorldConfig, perturbation: float = 0.01) -> WorldConfig:
    """`config` with its starting balls pinned and their velocities scaled."""
    start = initial_state(config)
    balls = []
    for row in start[: config.ball_count]:
        ball = BallState.from_row(row)
        balls.append(
            replace(ball, vx=row[VX] * (1.0 + perturbation), vy=row[VY] * (1.0 + perturbation))
        )
    return replace(config, initial=tuple(balls))


def ceiling_metrics(
    config: WorldConfig,
    force: Optional[ForceEvent],
    frames: int,
    cond_frames: int = 0,
    tau: float = 0.05,
    perturbation: float = 0.01,
) -> MetricsRecord:
    """Metrics between a ground-truth run and its perturbed rerun."""
    gt = simulate(config, force, frames)
    rerun = simulate(perturbed_world(config, perturbation), force, frames)
    record = video_metrics(
        render(rerun, config.height, config.width),
        render(gt, config.height, config.width),
        cond_frames,
        tau,
    )
    record.bounce_timing_error = bounce_timing_error(rerun, gt, config.height)
    record.trajectory_rmse = trajectory_rmse(rerun, gt)
    record.physics_iq = 100.0
    return record


def evaluate_sequence(
    gen_frames: np.ndarray,
    decoded: PhysStateSeq,
    config: WorldConfig,
    force: Optional[ForceEvent],
    cond_frames: int = 0,
    tau: float = 0.05,
    perturbation: float = 0.01,
) -> MetricsRecord:
    """Score one generated clip against a fresh ground-truth simulation."""
    frames = gen_frames.shape[0]
    gt = simulate(config, force, frames)
    record = video_metrics(gen_frames, render(gt, config.height, config.width), cond_frames, tau)
    ceiling = ceiling_metrics(config, force, frames, cond_frames, tau, perturbation)
    record.physics_iq = physics_iq_score(record, ceiling)
    record.bounce_timing_error = bounce_timing_error(decoded, gt, config.height)
    record.trajectory_rmse = trajectory_rmse(decoded, gt)
    logger.debug(
        "physics_iq %.2f (ceiling mse %.3g), bounce error %d",
        record.physics_iq,
        ceiling.mse,
        record.bounce_timing_error,
    )
    return record


def summarize(records: Sequence[MetricsRecord]) -> MetricsRecord:
    """Field-wise mean."""
    if not records:
        raise RejectedInput("cannot summarize an empty metrics list")
    return MetricsRecord(
        **{f.name: float(np.mean([getattr(r, f.name) for r in records])) for f in fields(MetricsRecord)}
    )


def compare_runs(results: Mapping[str, Sequence[MetricsRecord]]) -> list[dict]:
    """Per-model medians of the physics metrics and mean video metrics."""
    rows = []
    for name, records in results.items():
        mean = summarize(records)
        rows.append(
            {
                "model": name,
                "median_bounce_timing_error": float(
                    np.median([r.bounce_timing_error for r in records])
                ),
                "median_trajectory_rmse": float(np.median([r.trajectory_rmse for r in records])),
                "physics_iq": mean.physics_iq,
                "mse": mean.mse,
            }
        )
    return rows
