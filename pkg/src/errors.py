"""Errors raised by the sampler, estimand engine and CLI"""

from typing import Any, Optional


class PscError(Exception):
    """Base class for all package errors"""


class InvalidInputError(PscError, ValueError):
    """Malformed, non-finite or dimensionally inconsistent input"""


class ConfigError(PscError, ValueError):
    """Unknown or ill-typed configuration key, or degenerate run settings"""


class SchemaError(PscError, ValueError):
    """Malformed input file"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(PscError, ArithmeticError):
    """Factorization or sampling failure, with diagnostics attached"""

    def __init__(self, message: str, **diagnostics: Any):
        self.diagnostics = diagnostics
        self.partial_draws = None
        if diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class EmptyStratumError(PscError):
    """No retained draw has a unit inside the requested stratum"""
