# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Physflow Writer."""

import csv
import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import IO, Any, Union

import numpy as np

from physflow.constants import (
    ABLATION_COLUMNS,
    BALL_FIELDS,
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    FORCE_FORMAT,
    LOSS_LOG_COLUMNS,
    METRICS_COLUMNS,
)
from physflow.dataset import SceneRecord
from physflow.exceptions import RejectedInput, UnwritablePath
from physflow.header import ContainerHeader

__all__ = [
    "Writer",
    "DatasetWriter",
    "CheckpointWriter",
    "LossLogWriter",
    "MetricsWriter",
    "AblationWriter",
    "save_checkpoint",
    "export_pgm",
    "write_states_csv",
    "pack_array",
]


class Writer:
    """Base Writer object."""

    def __init__(self, file_handle: IO) -> None:
        self.file_handle = file_handle

    def write(self, item) -> None:
        raise NotImplementedError

    def close(self, close_fh: bool = True) -> None:
        """Closes the writer.

        If close_fh is False the underlying file handle passed to the
        constructor is left open. The default is True.
        """
        if close_fh:
            self.file_handle.close()
        self.file_handle = None  # type: ignore


class DatasetWriter(Writer):
    """Write scene records to a binary dataset container.

    The header is written first; on close the record count in it is
    rewritten when the handle is seekable.

    .. code-block:: python

        writer = DatasetWriter(open("train.phnt", "wb"), header)
        writer.write(record)
        writer.close()
    """

    def __init__(self, file_handle: IO, header: ContainerHeader) -> None:
        super().__init__(file_handle)
        self.header = header
        self.write_count = 0
        self.file_handle.write(bytes(header))

    def write(self, record: SceneRecord) -> None:
        header = self.header
        expected = (header.frames, header.height, header.width)
        if record.frames.shape != expected:
            raise RejectedInput(f"record frames {record.frames.shape} do not match header {expected}")
        if record.states.balls.shape != (header.frames, header.slots, 6):
            raise RejectedInput(f"record states {record.states.balls.shape} do not match header")
        force_frames = record.force_frames if record.descriptor.force_present else None
        if force_frames is not None and not header.force_channel:
            raise RejectedInput("record carries a force tensor but the header has no force channel")
        fh = self.file_handle
        fh.write(bytes(record.descriptor))
        force = record.force
        if force is None:
            fh.write(struct.pack(FORCE_FORMAT, *([0.0] * 6)))
        else:
            fh.write(
                struct.pack(
                    FORCE_FORMAT,
                    force.apply_frame,
                    force.duration,
                    force.coordx,
                    force.coordy,
                    force.magnitude,
                    force.angle,
                )
            )
        fh.write(np.ascontiguousarray(record.frames, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(record.states.balls, dtype="<f4").tobytes())
        if force_frames is not None:
            fh.write(np.ascontiguousarray(force_frames, dtype="<f4").tobytes())
        self.write_count += 1

    def close(self, close_fh: bool = True) -> None:
        if self.write_count != self.header.count:
            self.header.count = self.write_count
            if self.file_handle.seekable():
                position = self.file_handle.tell()
                self.file_handle.seek(0)
                self.file_handle.write(bytes(self.header))
                self.file_handle.seek(position)
        Writer.close(self, close_fh)


def pack_array(array: np.ndarray) -> bytes:
    """Rank, extents and little-endian f64 values of `array`."""
    array = np.ascontiguousarray(array, dtype="<f8")
    head = struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return head + array.tobytes()


def _pack_name(name: str) -> bytes:
    encoded = name.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded


class CheckpointWriter(Writer):
    """Write a model checkpoint.

    Layout: magic, version, a length-prefixed JSON metadata record (model
    config, schedule state, step), named parameter blobs in sorted order,
    freeze flags per partition, then the optimizer moments. Identical state
    gives identical bytes.
    """

    def write(self, checkpoint) -> None:
        fh = self.file_handle
        fh.write(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
        meta = json.dumps(checkpoint.meta(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        fh.write(struct.pack("<I", len(meta)) + meta)

        names = sorted(checkpoint.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            fh.write(_pack_name(name) + pack_array(checkpoint.params[name]))

        partitions = sorted(checkpoint.frozen_flags.items())
        fh.write(struct.pack("<H", len(partitions)))
        for partition, frozen in partitions:
            fh.write(_pack_name(partition) + struct.pack("<B", 1 if frozen else 0))

        state = checkpoint.optimizer
        moments = sorted(state.m)
        fh.write(struct.pack("<II", state.step, len(moments)))
        for name in moments:
            fh.write(_pack_name(name) + pack_array(state.m[name]) + pack_array(state.v[name]))


def save_checkpoint(path: Union[str, Path], checkpoint) -> None:
    """Write `checkpoint` to `path` atomically enough for a single writer."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        handle = open(tmp, "wb")
    except OSError as ex:
        raise UnwritablePath(path) from ex
    writer = CheckpointWriter(handle)
    writer.write(checkpoint)
    writer.close()
    tmp.replace(path)


def _format(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


class LossLogWriter(Writer):
    """Append training log rows as CSV.

    Each row carries the ``alpha_z`` and ``reset_count`` used during its
    step; a reset triggered at step k first shows in the row for k + 1.

    .. code-block:: python

        writer = LossLogWriter(open("loss.csv", "w", newline=""))
        writer.write(record)
        writer.close()
    """

    def __init__(self, file_handle: IO) -> None:
        super().__init__(file_handle)
        self.csv_writer = csv.DictWriter(file_handle, LOSS_LOG_COLUMNS, lineterminator="\n")
        self.csv_writer.writeheader()

    def write(self, record) -> None:
        row = {column: _format(getattr(record, column)) for column in LOSS_LOG_COLUMNS}
        self.csv_writer.writerow(row)
        self.file_handle.flush()


class MetricsWriter(Writer):
    """Write one CSV row per evaluated sequence plus a closing mean row."""

    def __init__(self, file_handle: IO) -> None:
        super().__init__(file_handle)
        self.csv_writer = csv.DictWriter(file_handle, METRICS_COLUMNS, lineterminator="\n")
        self.csv_writer.writeheader()

    def write(self, row: Mapping[str, Any]) -> None:
        self.csv_writer.writerow({k: _format(row[k]) for k in METRICS_COLUMNS})


class AblationWriter(Writer):
    """Comparison table of the dual-branch and zero-coupling models."""

    def __init__(self, file_handle: IO) -> None:
        super().__init__(file_handle)
        self.csv_writer = csv.DictWriter(file_handle, ABLATION_COLUMNS, lineterminator="\n")
        self.csv_writer.writeheader()

    def write(self, row: Mapping[str, Any]) -> None:
        self.csv_writer.writerow({k: _format(row[k]) for k in ABLATION_COLUMNS})


def export_pgm(
    frames: np.ndarray, directory: Union[str, Path], prefix: str = "frame"
) -> list[Path]:
    """Write each frame as a binary PGM (P5, maxval 255); returns the paths."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise UnwritablePath(directory) from ex
    paths = []
    width = len(str(max(0, frames.shape[0] - 1)))
    for t, frame in enumerate(frames):
        pixels = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        height, cols = pixels.shape
        path = directory / f"{prefix}_{t:0{width}d}.pgm"
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cols} {height}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
        paths.append(path)
    return paths


def write_states_csv(path: Union[str, Path], balls: np.ndarray) -> None:
    """Decoded states as CSV: one row per frame and active ball."""
    try:
        handle = open(path, "w", newline="")
    except OSError as ex:
        raise UnwritablePath(path) from ex
    with handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("frame", "ball") + BALL_FIELDS)
        for t in range(balls.shape[0]):
            for k in range(balls.shape[1]):
                if balls[t, k, 5] < 0.5:
                    continue
                writer.writerow([t, k] + [repr(float(v)) for v in balls[t, k]])
