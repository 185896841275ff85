from typing import Any, Dict


class UlriskError(Exception):
    """Base class for every error raised by the pipeline.

    Each family carries the process exit status the CLI reports for it.
    """

    exit_code = 4

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable form, printed by the CLI as one JSON line"""
        record = {"error": type(self).__name__, "code": self.exit_code, "message": str(self)}
        record.update({k: str(v) for k, v in self.context.items()})
        return record


class ConfigError(UlriskError):
    exit_code = 2


class ConfigInvalid(ConfigError):
    pass


class DataError(UlriskError):
    exit_code = 3


class SchemaMismatch(DataError):
    pass


class BadValue(DataError):
    pass


class EmptyFile(DataError):
    pass


class LengthMismatch(DataError):
    pass


class TooLarge(DataError):
    pass


class NoFeasibleSplit(DataError):
    pass


class TooFewRows(DataError):
    pass


class SingleClassEval(DataError):
    pass


class PoolTooSmall(DataError):
    pass


class TooFewDays(DataError):
    pass


class OutOfDomain(DataError):
    pass


class OutOfTimeRange(DataError):
    pass


class MissingVariable(DataError):
    pass


class SpecMismatch(DataError):
    pass


class IoFailure(DataError):
    pass


class InvariantViolation(UlriskError):
    exit_code = 4
