"""Exception hierarchy shared by all modules.

Every error raised on purpose by the package derives from ``MitosisError`` so
the CLI can report it with a stable prefix and a nonzero exit code.
"""

from __future__ import annotations


class MitosisError(Exception):
    """Base class for package errors."""


# data
class MissingFile(MitosisError, FileNotFoundError):
    pass


class SchemaViolation(MitosisError, ValueError):
    def __init__(self, field: str, message: str, line: int | None = None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"schema violation in field '{field}'{where}: {message}")


class CountMismatch(MitosisError, ValueError):
    pass


class PointOutOfBounds(MitosisError, ValueError):
    pass


class InvalidSpec(MitosisError, ValueError):
    pass


# augmentation
class NonSquareInput(MitosisError, ValueError):
    pass


class SingularMatrix(MitosisError, ValueError):
    pass


# model
class InvalidConfig(MitosisError, ValueError):
    pass


class ShapeMismatch(MitosisError, ValueError):
    pass


class CheckpointError(MitosisError):
    pass


class CorruptFile(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CheckpointIoError(CheckpointError, OSError):
    pass


# losses
class EmptyClass(MitosisError, ValueError):
    pass


# training
class TooFewDomains(MitosisError, ValueError):
    pass


class MissingDomain(MitosisError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class SingleClassTraining(MitosisError, ValueError):
    pass


# inference
class EmptyEnsemble(MitosisError, ValueError):
    pass


class MixedSampleIds(MitosisError, ValueError):
    pass


class UndefinedClassRate(MitosisError, ValueError):
    pass
