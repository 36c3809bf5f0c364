# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Exceptions for physflow."""

__all__ = [
    "PhysflowException",
    "RejectedInput",
    "ShapeMismatch",
    "NonScalarLoss",
    "NonDeterministicFunction",
    "EmptyBatch",
    "AllConditioningBatch",
    "TokenOverflow",
    "PatchDivisibility",
    "InvalidConfiguration",
    "InvalidWorldConfig",
    "OverlappingBalls",
    "InvalidModelConfig",
    "NumericAbort",
    "NonFiniteValue",
    "MissingGradients",
    "FatalReaderError",
    "BadMagic",
    "UnsupportedVersion",
    "TruncatedHeader",
    "TruncatedRecord",
    "UnwritablePath",
    "VelocityClampedWarning",
]


class PhysflowException(Exception):
    """Base physflow Exception."""

    pass


class RejectedInput(PhysflowException):
    """An operation was called outside its contract."""

    pass


class ShapeMismatch(RejectedInput):
    """Operand shapes are incompatible."""

    def __init__(self, op, left, right):
        super().__init__(op, left, right)
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)

    def __str__(self):
        return f"{self.op}: incompatible shapes {self.left} and {self.right}"


class NonScalarLoss(RejectedInput):
    """Backward was asked to start from a non-scalar tensor."""

    def __init__(self, shape):
        super().__init__(shape)
        self.shape = tuple(shape)

    def __str__(self):
        return f"backward requires a scalar loss, got shape {self.shape}"


class NonDeterministicFunction(RejectedInput):
    """Two evaluations of the same function at the same point disagreed."""

    def __init__(self, difference):
        super().__init__(difference)
        self.difference = difference

    def __str__(self):
        return f"function is not deterministic (evaluations differ by {self.difference!r})"


class EmptyBatch(RejectedInput):
    """A batch without records."""

    def __str__(self):
        return "Cannot build a training batch from zero records"


class AllConditioningBatch(RejectedInput):
    """Every token of the batch is a conditioning token."""

    def __str__(self):
        return "Batch has no loss tokens: every frame is a conditioning frame"


class TokenOverflow(RejectedInput):
    """Too many tokens for the positional table of a branch."""

    def __init__(self, branch, count, limit):
        super().__init__(branch, count, limit)
        self.branch = branch
        self.count = count
        self.limit = limit

    def __str__(self):
        return f"{self.branch} branch got {self.count} tokens, limit is {self.limit}"


class PatchDivisibility(RejectedInput):
    """Patch size does not divide the frame."""

    def __init__(self, height, width, patch):
        super().__init__(height, width, patch)
        self.height = height
        self.width = width
        self.patch = patch

    def __str__(self):
        return f"patch size {self.patch} does not divide a {self.height}x{self.width} frame"


class InvalidConfiguration(PhysflowException):
    """A configuration value is unknown, mistyped or out of range."""

    def __init__(self, key, reason):
        super().__init__(key, reason)
        self.key = key
        self.reason = reason

    def __str__(self):
        return f"{self.key}: {self.reason}"


class InvalidWorldConfig(InvalidConfiguration):
    """Invalid simulator configuration."""

    pass


class OverlappingBalls(InvalidWorldConfig):
    """Two balls overlap in the initial state."""

    def __init__(self, first, second):
        super().__init__("world.initial", f"balls {first} and {second} overlap")
        self.first = first
        self.second = second


class InvalidModelConfig(InvalidConfiguration):
    """Invalid model configuration."""

    pass


class NumericAbort(PhysflowException):
    """A non-finite value appeared during a numeric loop."""

    def __init__(self, step, where):
        super().__init__(step, where)
        self.step = step
        self.where = where

    def __str__(self):
        return f"non-finite value in {self.where} at step {self.step}"


class NonFiniteValue(NumericAbort):
    """A tensor operation produced NaN or Inf."""

    def __init__(self, op):
        super().__init__(-1, op)
        self.op = op

    def __str__(self):
        return f"{self.op} produced a non-finite value"


class MissingGradients(PhysflowException):
    """Trainable parameters without gradients."""

    def __init__(self, names):
        super().__init__(names)
        self.names = list(names)

    def __str__(self):
        return f"missing gradients for {', '.join(self.names)}"


class FatalReaderError(PhysflowException):
    """Error preventing further reading."""

    pass


class BadMagic(FatalReaderError):
    """The file does not start with the expected magic bytes."""

    def __init__(self, expected, found):
        super().__init__(expected, found)
        self.expected = expected
        self.found = found

    def __str__(self):
        return f"expected magic {self.expected!r}, found {self.found!r}"


class UnsupportedVersion(FatalReaderError):
    """Unknown container version."""

    def __init__(self, version):
        super().__init__(version)
        self.version = version

    def __str__(self):
        return f"unsupported container version {self.version}"


class TruncatedHeader(FatalReaderError):
    """Header shorter than its fixed layout."""

    def __str__(self):
        return "Container header is truncated"


class TruncatedRecord(FatalReaderError):
    """Truncated record data."""

    def __str__(self):
        return "Record length in header is greater than the length of data"


class UnwritablePath(PhysflowException):
    """An output path cannot be written."""

    def __init__(self, path):
        super().__init__(path)
        self.path = str(path)

    def __str__(self):
        return f"cannot write to {self.path}"


class VelocityClampedWarning(Warning):
    """Warning about velocities beyond the encoder cap."""

    pass
