"""Exception hierarchy shared across the package.

Exit codes used by the CLI hang off the exception classes so command
dispatch does not need a mapping table.
"""

from __future__ import annotations


class EvdError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(EvdError):
    """Bad or missing configuration."""

    exit_code = 2


class BackendError(EvdError):
    """A model backend reported an error or returned garbage."""

    exit_code = 3


class TransportError(BackendError):
    """Network-level failure talking to a backend; retryable."""


class CapabilityError(BackendError):
    """A selected method needs a capability the backend does not offer."""


class MissingTokenError(BackendError):
    """Neither of the requested tokens appeared in the logprob alternatives."""


class DataError(EvdError):
    """Corpus, dataset, or record files are unreadable or inconsistent."""

    exit_code = 4


class ParseFailure(EvdError):
    """Model output could not be parsed into the expected structure.

    Carries the raw text so callers can log or retry.
    """

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class AuditError(EvdError):
    """An internal isolation or consistency check failed; indicates a bug."""
