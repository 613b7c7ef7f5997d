"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes (usage 1, data 2, numeric 3),
so library code should raise the most specific one that applies.
"""

from __future__ import annotations

__all__ = ["BweLabError", "UsageError", "DataError", "NumericError"]


class BweLabError(Exception):
    """Base class for all toolkit errors."""


class UsageError(BweLabError):
    """Caller misuse: bad arguments, malformed config, invalid combinations."""


class DataError(BweLabError):
    """Broken or missing input data: files, manifests, checkpoints."""


class NumericError(BweLabError):
    """Numerical failure such as NaN loss or non-finite model output."""
