"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class RagCanaryError(Exception):
    """Base class for all package errors."""


class ValidationError(RagCanaryError):
    """Bad input, bad config, or a violated precondition."""


class TransportError(RagCanaryError):
    """A remote call failed after exhausting retries."""


class FixtureMissingError(TransportError):
    """Fixture mode is active and no recorded response exists for a request."""


class SynthesisError(RagCanaryError):
    """A canary synthesis stage failed after its retry budget."""

    def __init__(self, message, attempts=None, raw_output=None):
        super().__init__(message)
        self.attempts = attempts
        self.raw_output = raw_output


class DetectionError(RagCanaryError):
    """Watermark detection asked for on input where the statistic is undefined."""
