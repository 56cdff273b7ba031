"""Exception taxonomy shared across modules.

Operational failures raise SageError subclasses; the CLI maps them to exit
code 2 and the service maps them to 4xx responses (ConflictError -> 409).
"""


class SageError(Exception):
    """Base class for all operational errors raised by this package."""


class AggregationError(SageError):
    """Score list violates the aggregation preconditions."""


class PolicyMismatchError(SageError):
    """Two artifacts that must share a policy name/version do not."""


class LengthMismatchError(SageError):
    """Paired label sequences differ in length."""


class DegenerateMarginalsError(SageError):
    """Kappa is undefined: expected agreement is 1 with imperfect agreement."""


class JudgeError(SageError):
    """Judge misconfiguration or a facet naming an unknown attribute."""


class RemoteJudgeError(JudgeError):
    """Transport-level remote judge failure after retries (retryable)."""


class JudgeParseError(JudgeError):
    """Remote judge returned a response that could not be parsed."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class StoreError(SageError):
    """Append-only store precondition violated."""


class ConflictError(StoreError):
    """State transition already performed (e.g. disagreement already resolved)."""


class ImmutableHistoryError(ConflictError):
    """Attempt to rewrite an already-recorded value: history is immutable."""


class InsufficientHistoryError(SageError):
    """Not enough time-series points to evaluate a detection window."""


class UndefinedBaselineError(SageError):
    """Relative change against a zero baseline is undefined."""


class GateConfigError(SageError):
    """Gate thresholds are missing or signed incorrectly."""


class DistillError(SageError):
    """Corpus construction precondition violated."""


class SamplingError(SageError):
    """Stratified sampling precondition violated (e.g. empty log)."""
