"""Exception hierarchy shared by every nel_scope module."""


class NelScopeError(Exception):
    """Base class for all errors raised by nel_scope."""


class ParseError(NelScopeError, ValueError):
    """Input could not be parsed at the syntax level (bad JSON, bad label, bad wire data)."""


class ValidationError(NelScopeError, ValueError):
    """Input parsed but violates a value invariant."""


class ConfigError(NelScopeError, ValueError):
    """Configuration is inconsistent or references unknown ids."""


class DomainMismatchError(ParseError):
    """Hostname is not under the expected base domain."""
