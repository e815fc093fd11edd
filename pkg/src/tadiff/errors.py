"""Error taxonomy shared across the package.

ConfigError marks bad settings or flag combinations (CLI exit code 1);
DataError marks malformed inputs or runtime data problems (exit code 2).
"""


class ConfigError(ValueError):
    """Invalid configuration: bad schedule, geometry, or option values."""


class DataError(ValueError):
    """Malformed manifest, feature file, or inconsistent dataset state."""
