"""Error taxonomy shared across the package."""


class StructuralError(ValueError):
    """Shapes, dimensions or required structure are inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(ValueError):
    """A serialized artifact has a bad magic, version or layout."""
