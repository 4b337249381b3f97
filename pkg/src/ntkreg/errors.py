"""Exception hierarchy shared by all modules.

The CLI maps these onto distinct exit codes (see cli.py): validation
failures, numerical failures, and I/O failures are kept separate so batch
callers can react programmatically.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ToolkitError, ValueError):
    """Invalid arguments, violated preconditions, or malformed configuration."""


class EmptyDatasetError(ToolkitError):
    """A dataset constructor produced fewer than two usable examples."""


class DataFormatError(ToolkitError):
    """A binary file (IDX images/labels, kernel cache) is malformed or truncated."""


class StaleCacheError(ToolkitError):
    """A kernel cache was built from different inputs than the current dataset."""


class SingularityError(ToolkitError):
    """A positive-definite solve failed even after jitter escalation."""


class DivergenceError(ToolkitError):
    """An iterative optimizer produced a non-finite or runaway objective."""


class TrickViolationError(ToolkitError):
    """A model expected to have exactly zero initial output does not."""
