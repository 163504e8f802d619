"""Exception hierarchy shared by every sigllm module."""


class SigLLMError(Exception):
    """Base class for all sigllm errors."""


class InvalidInputError(SigLLMError, ValueError):
    """An argument violates the documented preconditions."""


class DataError(InvalidInputError):
    """A data file could not be parsed.

    Args:
        message (str):
            Description of the problem.
        line (int or None):
            1-based line number of the offending row, when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BackendError(SigLLMError):
    """Base class for model endpoint failures."""


class BackendUnavailableError(BackendError):
    """The endpoint could not be reached after exhausting all retries."""


class RequestRejectedError(BackendError):
    """The endpoint refused the request (4xx other than 429)."""

    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message)


class RepetitiveInputError(RequestRejectedError):
    """The endpoint refused the context as a repetitive prompt."""


class ReplayMissError(BackendError):
    """A replay transcript holds no entry for the requested context."""
