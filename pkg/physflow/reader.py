# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Physflow Reader."""

import csv
import json
import struct
from io import BytesIO
from pathlib import Path
from typing import IO, BinaryIO, Union

import numpy as np

from physflow.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, FORCE_FORMAT, LOSS_LOG_COLUMNS
from physflow.dataset import SceneRecord
from physflow.exceptions import BadMagic, TruncatedRecord, UnsupportedVersion
from physflow.header import DESCRIPTOR_SIZE, FORCE_SIZE, HEADER_SIZE, ContainerHeader, ScenarioDescriptor
from physflow.world import ForceEvent, PhysStateSeq

__all__ = [
    "Reader",
    "DatasetReader",
    "CheckpointReader",
    "read_dataset",
    "load_checkpoint",
    "read_loss_log",
]


class Reader:
    """A base class for all iterating readers in the physflow package."""

    file_handle: IO

    def __iter__(self):
        return self

    def close(self) -> None:
        """Close the handle."""
        self.file_handle.close()

    def _read_exact(self, size: int) -> bytes:
        chunk = self.file_handle.read(size)
        if len(chunk) < size:
            raise TruncatedRecord
        return chunk


class DatasetReader(Reader):
    """An iterator over the scene records of a dataset container.

    .. code-block:: python

        from physflow import DatasetReader

        with open("train.phnt", "rb") as fh:
            reader = DatasetReader(fh)
            print(reader.header.count)
            for record in reader:
                ...

    Raw container bytes may be passed instead of a file object.
    """

    def __init__(self, target: Union[BinaryIO, bytes]) -> None:
        if isinstance(target, bytes):
            self.file_handle = BytesIO(target)
        else:
            self.file_handle = target
        self.header = ContainerHeader.from_bytes(self.file_handle.read(HEADER_SIZE))
        self.position = 0

    def __len__(self) -> int:
        return self.header.count

    def __next__(self) -> SceneRecord:
        if self.position >= self.header.count:
            raise StopIteration
        header = self.header
        t, h, w = header.frames, header.height, header.width
        descriptor = ScenarioDescriptor.from_bytes(self._read_exact(DESCRIPTOR_SIZE))
        apply_frame, duration, coordx, coordy, magnitude, angle = struct.unpack(
            FORCE_FORMAT, self._read_exact(FORCE_SIZE)
        )
        force = None
        if duration >= 1:
            force = ForceEvent(
                apply_frame=int(apply_frame),
                coordx=coordx,
                coordy=coordy,
                magnitude=magnitude,
                angle=angle,
                duration=int(duration),
            )
        frames = self._read_array((t, h, w))
        balls = self._read_array((t, header.slots, header.latent_dim // header.slots))
        force_frames = None
        if descriptor.force_present:
            force_frames = self._read_array((t, h, w))
        self.position += 1
        return SceneRecord(
            descriptor=descriptor,
            frames=frames,
            states=PhysStateSeq(balls=balls, force=force),
            force=force,
            force_frames=force_frames,
        )

    def _read_array(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape))
        data = self._read_exact(4 * count)
        return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(shape)


def read_dataset(path: Union[str, Path]) -> tuple[ContainerHeader, list[SceneRecord]]:
    """Header and every record of the dataset at `path`."""
    with open(path, "rb") as fh:
        reader = DatasetReader(fh)
        records = list(reader)
    return reader.header, records


class CheckpointReader(Reader):
    """Parse a checkpoint written by :class:`physflow.writer.CheckpointWriter`."""

    def __init__(self, target: Union[BinaryIO, bytes]) -> None:
        if isinstance(target, bytes):
            self.file_handle = BytesIO(target)
        else:
            self.file_handle = target

    def _name(self) -> str:
        (length,) = struct.unpack("<H", self._read_exact(2))
        return self._read_exact(length).decode("utf-8")

    def _array(self) -> np.ndarray:
        (ndim,) = struct.unpack("<B", self._read_exact(1))
        shape = struct.unpack(f"<{ndim}I", self._read_exact(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        data = self._read_exact(8 * count)
        return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)

    def read(self):
        """Return the stored :class:`physflow.model.Checkpoint`."""
        from physflow.model import Checkpoint
        from physflow.optim import AdamState

        magic = self._read_exact(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(CHECKPOINT_MAGIC, magic)
        (version,) = struct.unpack("<H", self._read_exact(2))
        if version != CHECKPOINT_VERSION:
            raise UnsupportedVersion(version)
        (meta_len,) = struct.unpack("<I", self._read_exact(4))
        meta = json.loads(self._read_exact(meta_len).decode("utf-8"))

        (count,) = struct.unpack("<I", self._read_exact(4))
        params = {}
        for _ in range(count):
            name = self._name()
            params[name] = self._array()

        (partitions,) = struct.unpack("<H", self._read_exact(2))
        frozen = {}
        for _ in range(partitions):
            name = self._name()
            (flag,) = struct.unpack("<B", self._read_exact(1))
            frozen[name] = bool(flag)

        step, moments = struct.unpack("<II", self._read_exact(8))
        state = AdamState(step=step)
        for _ in range(moments):
            name = self._name()
            state.m[name] = self._array()
            state.v[name] = self._array()
        return Checkpoint.from_meta(meta, params, frozen, state)


def load_checkpoint(path: Union[str, Path]):
    with open(path, "rb") as fh:
        return CheckpointReader(fh).read()


def read_loss_log(path: Union[str, Path]) -> list[dict]:
    """Rows of a training log with numeric columns converted."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for column in LOSS_LOG_COLUMNS:
                value = row[column]
                if column in ("step", "reset_count", "clipped"):
                    parsed[column] = int(value)
                else:
                    parsed[column] = float(value)
            rows.append(parsed)
    return rows
