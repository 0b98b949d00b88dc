"""Exception hierarchy shared by every module of the package."""


class ShuffleHistError(Exception):
    """Base class for all errors raised by shufflehist."""


class DomainError(ShuffleHistError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class InfeasibleParametersError(ShuffleHistError, ValueError):
    """No protocol parameters satisfy the requested privacy/accuracy targets."""


class OutOfRegimeError(ShuffleHistError, ValueError):
    """Inputs fall outside the regime in which the analytic guarantees hold."""


class ResourceLimitError(ShuffleHistError, RuntimeError):
    """A computation would exceed a configured memory or enumeration cap."""


class CorpusError(ShuffleHistError, ValueError):
    """A corpus file is malformed or references tokens missing from the vocabulary."""
