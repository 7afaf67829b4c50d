"""Exception types shared across the package."""


class VadlabError(Exception):
    """Base class for all package errors."""


class ValidationError(VadlabError):
    """Input violates a documented precondition or invariant."""


class FormatError(VadlabError):
    """An on-disk payload is malformed (bad magic, version, or size)."""


class ContractError(VadlabError):
    """An operation was called outside its supported contract."""


class UndefinedMetricError(VadlabError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""
