
class Invert3DError(Exception):
    """Base error. Carries the CLI exit status and a machine-readable record."""

    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_record(self) -> dict:
        return {
            "error": type(self).__name__,
            "exit_code": self.exit_code,
            "message": self.message,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


class ConfigError(Invert3DError, ValueError):
    exit_code = 2


class MissingArtifactError(Invert3DError, FileNotFoundError):
    exit_code = 3


class SchemaError(Invert3DError):
    exit_code = 4


class NonFiniteError(Invert3DError, ArithmeticError):
    """NaN or inf loss / gradient. `details` holds the diagnostic."""

    exit_code = 5


class UsageError(Invert3DError):
    exit_code = 6


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return repr(value)
