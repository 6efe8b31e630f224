"""Error taxonomy shared by every module; the CLI maps these to exit codes."""

from __future__ import annotations


class UsageError(Exception):
    """Caller misuse: bad arguments, mismatched truncations, malformed input."""


class AdmissibilityError(Exception):
    """A specification or series fails a mathematical admissibility condition."""


class InternalConsistencyError(Exception):
    """Two independent computations disagree, or an exactness check failed."""
