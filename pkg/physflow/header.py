# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Fixed-layout dataset header and the scenario descriptor.

A dataset file is one header followed by ``count`` records, all
little-endian. The header packs magic, version, count, frames, height,
width, slots, latent_dim and flags, then two f32 fields that are not part
of the minimal layout: the velocity cap and the force cap the scenes were
simulated with, so a reader can rebuild the world bounds without the run
config. ``slots`` is stored next to ``latent_dim`` because records hold
raw ball state rather than encoded latents.

Each record is the 8 x u16 :class:`ScenarioDescriptor`, a force record,
the f32 frames (T, H, W), the f32 ball state (T, slots, 6) and, when the
header sets the force-channel flag and the descriptor marks a force, the
f32 force tensor. The force record is 6 x f32 in the order apply_frame,
duration, coordx, coordy, magnitude, angle. ``duration`` extends the
five-field force event so multi-frame pushes survive a round trip; an
all-zero record (duration 0) means no force.
"""

import math
import struct
from typing import Union

import numpy as np

from physflow.constants import (
    DATASET_MAGIC,
    DATASET_VERSION,
    DESCRIPTOR_FORMAT,
    DESCRIPTOR_LEN,
    FLAG_FORCE_CHANNEL,
    FORCE_FORMAT,
    HEADER_FORMAT,
)
from physflow.exceptions import (
    BadMagic,
    InvalidConfiguration,
    TruncatedHeader,
    UnsupportedVersion,
)

__all__ = ["ContainerHeader", "ScenarioDescriptor", "HEADER_SIZE", "DESCRIPTOR_SIZE"]

HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
DESCRIPTOR_SIZE = struct.calcsize(DESCRIPTOR_FORMAT)
FORCE_SIZE = struct.calcsize(FORCE_FORMAT)

_FIELDS = (
    "magic",
    "version",
    "count",
    "frames",
    "height",
    "width",
    "slots",
    "latent_dim",
    "flags",
    "velocity_cap",
    "force_cap",
)


class ContainerHeader:
    """Mutable dataset header.

    Values are read and written through properties (`count`, `frames`, ...)
    or by position (``header[2]``). ``bytes(header)`` packs the little-endian
    layout that starts every dataset file.

    .. code-block:: python

        header = ContainerHeader(count=8, frames=33, height=32, width=32,
                                 slots=1, latent_dim=6)
        header.force_channel = True
        ContainerHeader.from_bytes(bytes(header)).count  # 8
    """

    def __init__(
        self,
        count: int = 0,
        frames: int = 0,
        height: int = 0,
        width: int = 0,
        slots: int = 0,
        latent_dim: int = 0,
        flags: int = 0,
        velocity_cap: float = 0.0,
        force_cap: float = 0.0,
    ) -> None:
        self._values: list = [
            DATASET_MAGIC,
            DATASET_VERSION,
            count,
            frames,
            height,
            width,
            slots,
            latent_dim,
            flags,
            velocity_cap,
            force_cap,
        ]

    @classmethod
    def from_bytes(cls, data: bytes) -> "ContainerHeader":
        """Parse and validate a packed header."""
        if len(data) < HEADER_SIZE:
            if len(data) >= 4 and data[:4] != DATASET_MAGIC:
                raise BadMagic(DATASET_MAGIC, data[:4])
            raise TruncatedHeader
        values = list(struct.unpack(HEADER_FORMAT, data[:HEADER_SIZE]))
        if values[0] != DATASET_MAGIC:
            raise BadMagic(DATASET_MAGIC, values[0])
        if values[1] != DATASET_VERSION:
            raise UnsupportedVersion(values[1])
        header = cls()
        header._values = values
        return header

    def __getitem__(self, item: Union[str, int]):
        """Get values by position or by name."""
        if isinstance(item, int):
            return self._values[item]
        return getattr(self, item)

    def __bytes__(self) -> bytes:
        return struct.pack(HEADER_FORMAT, *self._values)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ContainerHeader) and bytes(self) == bytes(other)

    def __repr__(self) -> str:
        pairs = ", ".join(f"{name}={value!r}" for name, value in zip(_FIELDS, self._values))
        return f"ContainerHeader({pairs})"

    @property
    def version(self) -> int:
        return self._values[1]

    @property
    def count(self) -> int:
        """Number of records."""
        return self._values[2]

    @count.setter
    def count(self, value: int) -> None:
        self._values[2] = int(value)

    @property
    def frames(self) -> int:
        """Frames per record (T)."""
        return self._values[3]

    @property
    def height(self) -> int:
        return self._values[4]

    @property
    def width(self) -> int:
        return self._values[5]

    @property
    def slots(self) -> int:
        """Ball slots per frame (K)."""
        return self._values[6]

    @property
    def latent_dim(self) -> int:
        """Physics latent width (D_z)."""
        return self._values[7]

    @property
    def flags(self) -> int:
        return self._values[8]

    @property
    def force_channel(self) -> bool:
        """Whether records may carry a rendered force tensor."""
        return bool(self._values[8] & FLAG_FORCE_CHANNEL)

    @force_channel.setter
    def force_channel(self, value: bool) -> None:
        if value:
            self._values[8] |= FLAG_FORCE_CHANNEL
        else:
            self._values[8] &= ~FLAG_FORCE_CHANNEL

    @property
    def velocity_cap(self) -> float:
        return self._values[9]

    @property
    def force_cap(self) -> float:
        return self._values[10]

    def record_size(self, with_force: bool) -> int:
        """Bytes taken by one record."""
        pixels = self.frames * self.height * self.width
        size = DESCRIPTOR_SIZE + FORCE_SIZE + 4 * pixels + 4 * self.frames * self.latent_dim
        if with_force:
            size += 4 * pixels
        return size


class ScenarioDescriptor:
    """Eight discrete scenario tokens.

    Slots, in order: ball count, gravity on, restitution bucket (4), force
    present, then force x, y, magnitude and angle buckets (8 each, zero when
    there is no force).
    """

    RESTITUTION_BUCKETS = 4
    FORCE_BUCKETS = 8

    __slots__ = ("tokens",)

    def __init__(self, tokens) -> None:
        tokens = tuple(int(t) for t in tokens)
        if len(tokens) != DESCRIPTOR_LEN or min(tokens) < 0:
            raise InvalidConfiguration(
                "descriptor", f"expected {DESCRIPTOR_LEN} non-negative tokens, got {tokens}"
            )
        self.tokens = tokens

    @classmethod
    def describe(
        cls,
        ball_count: int,
        gravity: float,
        restitution: float,
        force=None,
        height: int = 32,
        width: int = 32,
        force_cap: float = 64.0,
    ) -> "ScenarioDescriptor":
        """Quantise a scenario into tokens."""
        rest = min(int(restitution * cls.RESTITUTION_BUCKETS), cls.RESTITUTION_BUCKETS - 1)
        tokens = [ball_count, 1 if gravity > 0 else 0, rest, 0, 0, 0, 0, 0]
        if force is not None and force.magnitude > 0:
            n = cls.FORCE_BUCKETS
            tokens[3] = 1
            tokens[4] = _bucket(force.coordx / width, n)
            tokens[5] = _bucket(force.coordy / height, n)
            tokens[6] = _bucket(force.magnitude / force_cap, n)
            tokens[7] = _bucket((force.angle % 360.0) / 360.0, n)
        return cls(tokens)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ScenarioDescriptor":
        return cls(struct.unpack(DESCRIPTOR_FORMAT, data))

    def __bytes__(self) -> bytes:
        return struct.pack(DESCRIPTOR_FORMAT, *self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ScenarioDescriptor) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return f"ScenarioDescriptor({list(self.tokens)})"

    def __iter__(self):
        return iter(self.tokens)

    @property
    def ball_count(self) -> int:
        return self.tokens[0]

    @property
    def gravity_on(self) -> bool:
        return bool(self.tokens[1])

    @property
    def force_present(self) -> bool:
        """Whether the record carries a force event."""
        return bool(self.tokens[3])

    def embedding_indices(self, vocab: int) -> np.ndarray:
        """Row of each token in a ``DESCRIPTOR_LEN * vocab`` embedding table."""
        if max(self.tokens) >= vocab:
            raise InvalidConfiguration(
                "model.context_vocab", f"token {max(self.tokens)} does not fit vocab {vocab}"
            )
        return np.arange(DESCRIPTOR_LEN) * vocab + np.array(self.tokens)


def _bucket(fraction: float, buckets: int) -> int:
    if math.isnan(fraction):
        return 0
    return min(max(int(fraction * buckets), 0), buckets - 1)
