"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation problems exit
with 2, resource problems (memory budget, disk, lock contention) with 3,
anything else with 1.
"""


class BitstormError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(BitstormError):
    """Malformed input: bad config values, shape mismatches, broken files."""


class ResourceError(BitstormError):
    """Environment cannot satisfy the request: budget, disk, locks."""
