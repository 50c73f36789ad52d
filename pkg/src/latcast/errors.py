"""Exception types shared across the package.

The CLI maps ValidationError to exit code 2 and NumericalError to exit
code 3; everything else is a bug.
"""


class ValidationError(ValueError):
    """Bad configuration, malformed input, or violated preconditions."""


class NumericalError(RuntimeError):
    """Non-finite values or other numerical failure at runtime."""
