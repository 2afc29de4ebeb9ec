"""
Error hierarchy shared by the library and the CLI
Every error carries the process exit code the CLI reports for it
"""

from typing import Any, Dict, Optional


class SfBayesError(Exception):
    """Base class for all package errors"""

    exit_code: int = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = dict(details or {})

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable form written by the CLI as error JSON"""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            "details": self.details,
        }


class InputError(SfBayesError, ValueError):
    """Malformed data, files or arguments"""

    exit_code = 2


class DomainError(InputError):
    """Argument outside the domain of a function"""


class NumericalError(SfBayesError, ArithmeticError):
    """Linear algebra failure or non-finite values"""

    exit_code = 3

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None,
        iteration: Optional[int] = None,
        block: Optional[str] = None,
    ):
        super().__init__(message, details)
        self.iteration = iteration
        self.block = block
        if iteration is not None:
            self.details["iteration"] = iteration
        if block is not None:
            self.details["block"] = block


class ConfigurationError(SfBayesError):
    """Invalid run configuration"""

    exit_code = 4
