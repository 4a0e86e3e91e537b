"""Exception hierarchy shared by every module.

The CLI maps :class:`UsageError` to exit code 1 and every other
:class:`AmiLabError` to exit code 2.
"""


class AmiLabError(Exception):
    """Base class for all lab errors."""


class UsageError(AmiLabError):
    """Caller asked for something that makes no sense (empty input, bad flag)."""


class DimensionError(AmiLabError, ValueError):
    """Tensor shapes do not line up."""


class StateError(AmiLabError, RuntimeError):
    """An operation was called in the wrong order."""


class ConfigurationError(AmiLabError, ValueError):
    pass


class AttributeLookupError(AmiLabError, KeyError):
    pass


class TrainingError(AmiLabError, RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ParseError(AmiLabError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(AmiLabError, ValueError):
    """A binary or JSON artifact is malformed."""
