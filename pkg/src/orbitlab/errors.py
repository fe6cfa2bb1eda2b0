"""Common exception base so callers (and the CLI) can classify failures."""


class OrbitLabError(Exception):
    """Base class for numerical / model failures raised by this package."""
