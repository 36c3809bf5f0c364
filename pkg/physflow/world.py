# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Bouncing-ball world: simulation, rendering and the oracle physics encoder.

Coordinates are pixels with the origin at the top-left corner, ``x`` to the
right and ``y`` downward, so gravity is positive. Pixel ``(row, col)`` has its
centre at ``(x=col, y=row)``.

.. code-block:: python

    from physflow import WorldConfig, simulate, render

    config = WorldConfig(seed=7)
    states = simulate(config, None, 33)
    frames = render(states, config.height, config.width)
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from physflow.constants import (
    BALL_FIELD_COUNT,
    DEFAULT_VELOCITY_CAP,
    FORCE_SIGMA,
    FORCE_TOKEN_DIM,
    MAX_BALLS,
)
from physflow.exceptions import (
    InvalidWorldConfig,
    OverlappingBalls,
    RejectedInput,
    VelocityClampedWarning,
)

__all__ = [
    "BallState",
    "ForceEvent",
    "Impact",
    "WorldConfig",
    "PhysStateSeq",
    "PhysicsEncoder",
    "OracleEncoder",
    "initial_state",
    "simulate",
    "render",
    "render_force_tensor",
    "encode_force",
    "encode_physics",
    "decode_physics",
    "mechanical_energy",
]

logger = logging.getLogger("physflow")

# column indices into a (K, 6) ball array
X, Y, VX, VY, RADIUS, ACTIVE = range(BALL_FIELD_COUNT)


@dataclass(frozen=True)
class BallState:
    """One ball at one frame."""

    x: float = 0.0
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    radius: float = 0.0
    active: bool = False

    def as_row(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.vx, self.vy, self.radius, 1.0 if self.active else 0.0]
        )

    @classmethod
    def from_row(cls, row: np.ndarray) -> "BallState":
        return cls(
            x=float(row[X]),
            y=float(row[Y]),
            vx=float(row[VX]),
            vy=float(row[VY]),
            radius=float(row[RADIUS]),
            active=bool(row[ACTIVE] >= 0.5),
        )


@dataclass(frozen=True)
class ForceEvent:
    """A point impulse applied over `duration` frames from `apply_frame`.

    `angle` is in degrees, counter-clockwise from the +x axis as seen on
    screen, so 90 pushes upward.
    """

    apply_frame: int
    coordx: float
    coordy: float
    magnitude: float
    angle: float = 0.0
    duration: int = 1

    def __post_init__(self) -> None:
        if self.apply_frame < 0:
            raise InvalidWorldConfig("force.apply_frame", "must be non-negative")
        if self.magnitude < 0:
            raise InvalidWorldConfig("force.magnitude", "must be non-negative")
        if self.duration < 1:
            raise InvalidWorldConfig("force.duration", "must be at least 1")

    def active_at(self, frame: int) -> bool:
        return self.apply_frame <= frame < self.apply_frame + self.duration

    def per_frame_delta(self) -> tuple[float, float]:
        theta = math.radians(self.angle)
        share = self.magnitude / self.duration
        return share * math.cos(theta), -share * math.sin(theta)


@dataclass(frozen=True)
class Impact:
    """A collision resolved while advancing into `frame`."""

    frame: int
    ball: int
    wall: str
    pre_speed: float
    post_speed: float


@dataclass(frozen=True)
class WorldConfig:
    """Simulator settings.

    `ball_count` balls are active out of `slots` state slots (the latent
    width is ``6 * slots``). `initial` pins the starting balls instead of
    drawing them from `seed`.
    """

    gravity: float = 48.0
    restitution: float = 0.9
    dt: float = 1.0 / 16.0
    height: int = 32
    width: int = 32
    ball_count: int = 1
    slots: Optional[int] = None
    radius_range: tuple[float, float] = (3.0, 5.0)
    init_x_range: tuple[float, float] = (0.2, 0.8)
    init_y_range: tuple[float, float] = (0.15, 0.5)
    velocity_range: tuple[float, float] = (-24.0, 24.0)
    velocity_cap: Optional[float] = None
    force_cap: float = 64.0
    seed: int = 0
    initial: Optional[tuple[BallState, ...]] = field(default=None, compare=True)

    def __post_init__(self) -> None:
        if self.slots is None:
            object.__setattr__(self, "slots", self.ball_count)
        if not 0 <= self.ball_count <= MAX_BALLS:
            raise InvalidWorldConfig("world.ball_count", f"must lie in 0..{MAX_BALLS}")
        if not self.ball_count <= self.slots <= MAX_BALLS or self.slots < 1:
            raise InvalidWorldConfig("world.slots", f"must lie in max(1, ball_count)..{MAX_BALLS}")
        if self.gravity < 0:
            raise InvalidWorldConfig("world.gravity", "must be non-negative")
        if not 0 <= self.restitution <= 1:
            raise InvalidWorldConfig("world.restitution", "must lie in [0, 1]")
        if not self.dt > 0:
            raise InvalidWorldConfig("world.dt", "must be positive")
        if self.height < 4 or self.width < 4:
            raise InvalidWorldConfig("world.height", "frames must be at least 4x4")
        low, high = self.radius_range
        if not 0 < low <= high < self.max_radius:
            raise InvalidWorldConfig(
                "world.radius_range", f"radii must lie in (0, {self.max_radius})"
            )
        for key in ("init_x_range", "init_y_range"):
            lo, hi = getattr(self, key)
            if not 0 <= lo <= hi <= 1:
                raise InvalidWorldConfig(f"world.{key}", "must be a sub-range of [0, 1]")
        if self.velocity_range[0] > self.velocity_range[1]:
            raise InvalidWorldConfig("world.velocity_range", "low exceeds high")
        if self.velocity_cap is not None and not self.velocity_cap > 0:
            raise InvalidWorldConfig("world.velocity_cap", "must be positive")
        if not self.force_cap > 0:
            raise InvalidWorldConfig("world.force_cap", "must be positive")
        if self.initial is not None:
            if len(self.initial) != self.ball_count:
                raise InvalidWorldConfig("world.initial", "needs one entry per ball")
            for ball in self.initial:
                if not 0 < ball.radius < self.max_radius:
                    raise InvalidWorldConfig("world.initial", "radius out of range")

    @property
    def max_radius(self) -> float:
        """Radii must stay below a quarter of the smaller frame extent."""
        return min(self.height, self.width) / 4.0

    @property
    def cap(self) -> float:
        """Velocity normalisation cap of the physics encoder."""
        if self.velocity_cap is not None:
            return float(self.velocity_cap)
        if self.gravity > 0:
            return 4.0 * math.sqrt(self.gravity * self.height)
        return DEFAULT_VELOCITY_CAP

    @property
    def latent_dim(self) -> int:
        return BALL_FIELD_COUNT * self.slots


@dataclass
class PhysStateSeq:
    """Per-frame ball states.

    `balls` has shape ``(T, K, 6)`` with columns ``x, y, vx, vy, radius,
    active``; inactive slots are all zero.
    """

    balls: np.ndarray
    force: Optional[ForceEvent] = None
    impacts: list[Impact] = field(default_factory=list)

    def __len__(self) -> int:
        return self.balls.shape[0]

    def __getitem__(self, index: tuple[int, int]) -> BallState:
        t, k = index
        return BallState.from_row(self.balls[t, k])

    @property
    def frames(self) -> int:
        return self.balls.shape[0]

    @property
    def slots(self) -> int:
        return self.balls.shape[1]

    def active_mask(self) -> np.ndarray:
        return self.balls[..., ACTIVE] >= 0.5


def _overlaps(a: np.ndarray, b: np.ndarray) -> bool:
    return math.hypot(a[X] - b[X], a[Y] - b[Y]) < a[RADIUS] + b[RADIUS]


def initial_state(config: WorldConfig, max_attempts: int = 100) -> np.ndarray:
    """Starting ball array of shape ``(slots, 6)``.

    Balls are drawn from ``config.seed`` unless ``config.initial`` pins them.
    Overlapping balls are rejected.
    """
    balls = np.zeros((config.slots, BALL_FIELD_COUNT))
    if config.initial is not None:
        for k, ball in enumerate(config.initial):
            row = ball.as_row()
            row[ACTIVE] = 1.0
            row[X] = min(max(row[X], row[RADIUS]), config.width - row[RADIUS])
            row[Y] = min(max(row[Y], row[RADIUS]), config.height - row[RADIUS])
            balls[k] = row
        for i in range(config.ball_count):
            for j in range(i + 1, config.ball_count):
                if _overlaps(balls[i], balls[j]):
                    raise OverlappingBalls(i, j)
        return balls

    rng = np.random.default_rng(config.seed)
    for k in range(config.ball_count):
        for _ in range(max_attempts):
            radius = rng.uniform(*config.radius_range)
            x = rng.uniform(*config.init_x_range) * config.width
            y = rng.uniform(*config.init_y_range) * config.height
            x = min(max(x, radius), config.width - radius)
            y = min(max(y, radius), config.height - radius)
            vx, vy = rng.uniform(*config.velocity_range, size=2)
            candidate = np.array([x, y, vx, vy, radius, 1.0])
            if not any(_overlaps(candidate, balls[j]) for j in range(k)):
                balls[k] = candidate
                break
        else:
            raise OverlappingBalls(k - 1, k)
    return balls


def _force_target(balls: np.ndarray, force: ForceEvent) -> Optional[int]:
    """Active ball whose disc contains the application point, nearest first."""
    best, best_dist = None, math.inf
    for k, row in enumerate(balls):
        if row[ACTIVE] < 0.5:
            continue
        dist = math.hypot(row[X] - force.coordx, row[Y] - force.coordy)
        if dist <= row[RADIUS] and dist < best_dist:
            best, best_dist = k, dist
    return best


def _step(
    balls: np.ndarray,
    config: WorldConfig,
    frame: int,
    impulse: Optional[tuple[int, float, float]],
    impacts: list[Impact],
) -> np.ndarray:
    """Advance one frame with semi-implicit Euler, then walls, then pairs.

    Side walls reflect with ``vx <- -e * vx``. The floor and ceiling do not
    use ``vy <- -e * vy`` on the stored velocity: the centred velocity
    ``vy + g*dt/2`` is carried back to the wall, giving the normal speed
    ``s`` at contact, and the ball leaves with centred speed ``e * s``. At
    e = 1 this keeps :func:`mechanical_energy` constant across bounces.
    """
    g, dt, e = config.gravity, config.dt, config.restitution
    half = 0.5 * g * dt
    out = balls.copy()
    for k, row in enumerate(out):
        if row[ACTIVE] < 0.5:
            continue
        row[VY] += g * dt
        if impulse is not None and impulse[0] == k:
            row[VX] += impulse[1]
            row[VY] += impulse[2]
        row[X] += row[VX] * dt
        row[Y] += row[VY] * dt
        r = row[RADIUS]

        # floor and ceiling work on the time-centred velocity vy + g*dt/2,
        # for which free flight conserves energy exactly
        for limit, sign, wall in ((config.height - r, 1.0, "floor"), (r, -1.0, "ceiling")):
            if sign * (row[Y] - limit) > 0:
                centred = row[VY] + half
                speed = math.sqrt(max(0.0, centred * centred + 2.0 * g * (limit - row[Y])))
                row[Y] = limit
                row[VY] = -sign * e * speed - half
                impacts.append(Impact(frame, k, wall, speed, e * speed))

        for limit, sign, wall in ((config.width - r, 1.0, "right"), (r, -1.0, "left")):
            if sign * (row[X] - limit) > 0:
                row[X] = limit
                if sign * row[VX] > 0:
                    speed = abs(row[VX])
                    row[VX] = -e * row[VX]
                    impacts.append(Impact(frame, k, wall, speed, e * speed))

    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            a, b = out[i], out[j]
            if a[ACTIVE] < 0.5 or b[ACTIVE] < 0.5:
                continue
            dx, dy = b[X] - a[X], b[Y] - a[Y]
            dist = math.hypot(dx, dy)
            if dist == 0.0 or dist >= a[RADIUS] + b[RADIUS]:
                continue
            nx, ny = dx / dist, dy / dist
            closing = (a[VX] - b[VX]) * nx + (a[VY] - b[VY]) * ny
            if closing <= 0:
                continue
            a[VX] -= closing * nx
            a[VY] -= closing * ny
            b[VX] += closing * nx
            b[VY] += closing * ny
            impacts.append(Impact(frame, i, "ball", closing, closing))
    return out


def simulate(config: WorldConfig, force: Optional[ForceEvent], frames: int) -> PhysStateSeq:
    """Run the world for `frames` frames; frame 0 is the initial state.

    A force active at frame ``f`` acts on the transition ``f -> f+1`` and
    targets the ball containing its application point at the apply frame.
    """
    if frames < 2:
        raise RejectedInput(f"simulate needs at least 2 frames, got {frames}")
    balls = np.zeros((frames, config.slots, BALL_FIELD_COUNT))
    balls[0] = initial_state(config)
    impacts: list[Impact] = []
    target: Optional[int] = None
    delta = (0.0, 0.0)
    if force is not None:
        delta = force.per_frame_delta()
    for f in range(frames - 1):
        impulse = None
        if force is not None:
            if f == force.apply_frame:
                target = _force_target(balls[f], force)
                if target is None:
                    logger.debug("force at frame %d hits no ball", f)
            if target is not None and force.active_at(f):
                impulse = (target, delta[0], delta[1])
        balls[f + 1] = _step(balls[f], config, f + 1, impulse, impacts)
    return PhysStateSeq(balls=balls, force=force, impacts=impacts)


def mechanical_energy(states: PhysStateSeq, config: WorldConfig) -> np.ndarray:
    """Per-frame kinetic plus potential energy summed over active balls.

    Uses the time-centred vertical velocity ``vy + g*dt/2``.
    """
    half = 0.5 * config.gravity * config.dt
    b = states.balls
    active = b[..., ACTIVE] >= 0.5
    vy = b[..., VY] + half
    energy = 0.5 * (b[..., VX] ** 2 + vy**2) + config.gravity * (config.height - b[..., Y])
    return np.where(active, energy, 0.0).sum(axis=1)


def render(states: PhysStateSeq, height: int, width: int) -> np.ndarray:
    """Draw every active ball as an anti-aliased disc; returns ``(T, H, W)``.

    Pixel intensity is ``clip(radius + 0.5 - distance, 0, 1)`` and
    overlapping discs take the maximum.
    """
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    frames = np.zeros((states.frames, height, width))
    for t in range(states.frames):
        for row in states.balls[t]:
            if row[ACTIVE] < 0.5:
                continue
            dist = np.sqrt((cols - row[X]) ** 2 + (rows - row[Y]) ** 2)
            disc = np.clip(row[RADIUS] + 0.5 - dist, 0.0, 1.0)
            np.maximum(frames[t], disc, out=frames[t])
    return frames


def render_force_tensor(
    force: Optional[ForceEvent], frames: int, height: int, width: int, cap: float
) -> np.ndarray:
    """Gaussian blob at the application point during the active frames.

    The peak equals ``magnitude / cap``; all other frames are zero.
    """
    out = np.zeros((frames, height, width))
    if force is None or force.magnitude == 0:
        return out
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    sq = (cols - force.coordx) ** 2 + (rows - force.coordy) ** 2
    blob = (force.magnitude / cap) * np.exp(-sq / (2.0 * FORCE_SIGMA**2))
    for f in range(force.apply_frame, min(frames, force.apply_frame + force.duration)):
        out[f] = blob
    return out


def encode_force(force_frames: Optional[np.ndarray], frames: int) -> np.ndarray:
    """Per-frame force tokens ``[active, x, y, peak]`` in [-1, 1].

    ``active`` is +1 on frames carrying a blob; ``x`` and ``y`` locate the
    brightest pixel relative to the frame centre.
    """
    tokens = np.zeros((frames, FORCE_TOKEN_DIM))
    tokens[:, 0] = -1.0
    tokens[:, 3] = -1.0
    if force_frames is None:
        return tokens
    _, height, width = force_frames.shape
    for f in range(frames):
        peak = float(force_frames[f].max())
        if peak <= 0:
            continue
        row, col = np.unravel_index(int(np.argmax(force_frames[f])), (height, width))
        tokens[f] = [
            1.0,
            col / (width / 2.0) - 1.0,
            row / (height / 2.0) - 1.0,
            2.0 * min(peak, 1.0) - 1.0,
        ]
    return tokens


class PhysicsEncoder(Protocol):
    """Maps state sequences to ``(T, D_z)`` latents and back."""

    @property
    def dim(self) -> int: ...

    def encode(self, states: PhysStateSeq) -> np.ndarray: ...

    def decode(self, latents: np.ndarray) -> PhysStateSeq: ...


class OracleEncoder:
    """Affine per-field normalisation of the exact simulator state.

    Positions map through the frame extents, velocities through the
    configuration's velocity cap, radii through the radius bound and the
    active flag to -1/+1.
    """

    def __init__(self, config: WorldConfig) -> None:
        self.config = config
        self.half_w = config.width / 2.0
        self.half_h = config.height / 2.0
        self.half_r = config.max_radius / 2.0
        self.cap = config.cap

    @property
    def dim(self) -> int:
        return self.config.latent_dim

    def encode(self, states: PhysStateSeq) -> np.ndarray:
        b = states.balls
        z = np.empty_like(b)
        z[..., X] = b[..., X] / self.half_w - 1.0
        z[..., Y] = b[..., Y] / self.half_h - 1.0
        vel = b[..., VX : VY + 1] / self.cap
        if np.any(np.abs(vel) > 1.0):
            warnings.warn(
                VelocityClampedWarning(
                    f"velocities beyond cap {self.cap:.3f} were clamped"
                ),
                stacklevel=2,
            )
            vel = np.clip(vel, -1.0, 1.0)
        z[..., VX : VY + 1] = vel
        z[..., RADIUS] = b[..., RADIUS] / self.half_r - 1.0
        z[..., ACTIVE] = 2.0 * b[..., ACTIVE] - 1.0
        return z.reshape(b.shape[0], -1)

    def decode(self, latents: np.ndarray) -> PhysStateSeq:
        z = np.asarray(latents, dtype=np.float64)
        z = z.reshape(z.shape[0], -1, BALL_FIELD_COUNT)
        b = np.empty_like(z)
        b[..., X] = (z[..., X] + 1.0) * self.half_w
        b[..., Y] = (z[..., Y] + 1.0) * self.half_h
        b[..., VX : VY + 1] = z[..., VX : VY + 1] * self.cap
        b[..., RADIUS] = (z[..., RADIUS] + 1.0) * self.half_r
        active = z[..., ACTIVE] >= 0.0
        b[..., ACTIVE] = 1.0
        b[~active] = 0.0
        return PhysStateSeq(balls=b)


def encode_physics(states: PhysStateSeq, config: WorldConfig) -> np.ndarray:
    """``(T, 6K)`` latent of `states` under the oracle encoder."""
    return OracleEncoder(config).encode(states)


def decode_physics(latents: np.ndarray, config: WorldConfig) -> PhysStateSeq:
    """Inverse of :func:`encode_physics`; inactive slots come back zeroed."""
    return OracleEncoder(config).decode(latents)
