"""Exceptions raised by SmartMerge.

Each class also derives from the builtin exception a caller would expect, so
``except ValueError`` keeps working around scenario or config parsing.
"""


class SmartMergeError(Exception):
    """Base class of every error raised by the package."""


class ScenarioError(SmartMergeError, ValueError):
    """A scenario spec violates one of its invariants or cannot be generated."""


class ConfigError(SmartMergeError, ValueError):
    """A configuration document could not be parsed or validated."""


class SimulationError(SmartMergeError, ValueError):
    """The simulator was driven outside its contract."""


class MaskViolationError(SmartMergeError, ValueError):
    """An action outside the permitted set was issued or recorded."""


class CheckpointError(SmartMergeError, IOError):
    """A checkpoint file is missing, corrupt or truncated."""


class NonFiniteError(SmartMergeError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class UnknownMethodError(SmartMergeError, KeyError):
    """An evaluation method name is not registered."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UsageError(SmartMergeError, ValueError):
    """A command was invoked without an input it needs."""
