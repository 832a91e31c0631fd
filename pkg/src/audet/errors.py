"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError family to 1, data and
format problems to 2, numeric failures to 3.
"""


class ContractViolation(ValueError):
    """A documented precondition (shape, range, ordering) was broken."""


class NumericError(RuntimeError):
    """NaN or Inf where finite values were required, or a failed numeric check."""


class FormatError(Exception):
    """A file does not match its declared binary or text format."""


class CorruptionError(FormatError):
    """Header parsed fine but payload bytes are missing or inconsistent."""


class EmptyCorpusError(Exception):
    """No usable corpus data found where at least one video was required."""


class EmptyBatchError(Exception):
    """Every label in a training batch was marked unknown; nothing to learn."""


class ConfigError(Exception):
    """Unknown key, malformed value, or out-of-range setting."""
