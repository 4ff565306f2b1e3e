"""Exception hierarchy shared by all printkind modules.

The CLI maps these onto exit codes: DataError (and ValueError/OSError)
exit 2, NumericsError exit 3. Usage errors are handled by the argument
parser itself and exit 1.
"""


class PrintKindError(Exception):
    """Base class for all printkind errors."""


class DataError(PrintKindError):
    """Invalid data, shapes, formats, or configuration."""


class NumericsError(PrintKindError):
    """Non-finite values encountered where finite numbers are required."""


class ArchParseError(DataError):
    """Architecture DSL syntax error, carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(DataError):
    """Base class for checkpoint file problems."""


class CheckpointBadMagic(CheckpointError):
    pass


class CheckpointVersionMismatch(CheckpointError):
    pass


class CheckpointTruncated(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    """Tensor-shape or architecture mismatch inside an otherwise readable file."""
