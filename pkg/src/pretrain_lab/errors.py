"""Exception types shared across the toolkit.

Exit-code mapping used by the CLI: config problems exit 2, data problems
exit 3, numerical aborts exit 4.
"""


class PretrainLabError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(PretrainLabError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(PretrainLabError):
    """Bad experiment configuration. Carries a file position when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class DataError(PretrainLabError):
    """Task or corpus data violates its declared schema or value space."""


class SchemaError(DataError):
    """A task file is missing declared columns."""


class CorruptCorpusError(DataError):
    """A corpus file failed validation while being read."""


class MissingLabelsError(InvalidArgument):
    """An operation that needs push/pop labels got an unlabeled record."""


class GenerationError(PretrainLabError):
    """A stochastic generator could not satisfy its postcondition."""


class NumericalAbort(PretrainLabError):
    """Training hit a non-finite loss or parameter."""


class StageError(PretrainLabError):
    """A pipeline stage failed; wraps the original error with a stage tag."""

    def __init__(self, stage: str, arm: str | None, cause: BaseException):
        self.stage = stage
        self.arm = arm
        self.cause = cause
        where = f"stage {stage}" + (f", arm {arm}" if arm else "")
        super().__init__(f"[{where}] {cause}")


class SkipRecord(Exception):
    """Control-flow signal: record too short to use; not an error."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the documented CLI exit code."""
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalAbort):
        return EXIT_NUMERICAL
    if isinstance(exc, InvalidArgument):
        return EXIT_CONFIG
    return 1
