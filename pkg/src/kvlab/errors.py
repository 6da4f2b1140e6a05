"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, InvariantError -> 2,
MissingArtifactError -> 3.
"""


class UsageError(Exception):
    """Bad command line or config input."""


class InvariantError(ValueError):
    """A documented contract or invariant was violated."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage requires an artifact another stage has not produced."""
