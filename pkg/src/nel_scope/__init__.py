"""Induce client-side active measurements through Network Error Logging report uploads."""

from nel_scope.errors import ConfigError, DomainMismatchError, NelScopeError, ParseError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainMismatchError",
    "NelScopeError",
    "ParseError",
    "ValidationError",
    "__version__",
]
