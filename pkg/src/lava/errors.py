"""Exception types shared across the package."""


class ConfigurationError(Exception):
    """Bad or inconsistent configuration (unknown keys, invalid shapes, missing stage inputs)."""


class DataError(Exception):
    """Malformed data files: manifests, images, embedding tables."""


class CheckpointError(Exception):
    """Unreadable or incompatible checkpoint container."""
