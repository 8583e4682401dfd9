"""Exception types shared across the package."""


class DbsaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DbsaError, ValueError):
    """Tensor dimensions do not match an operation's contract."""


class MaskError(DbsaError, ValueError):
    """Attention mask is malformed (e.g. a fully-masked query row)."""


class ConfigError(DbsaError, ValueError):
    """Invalid model or method configuration."""


class ValidationError(DbsaError, ValueError):
    """Invalid runtime input (token ids, positions, selections, flags)."""


class CompatibilityError(DbsaError, ValueError):
    """Artifacts built for different model configurations were mixed."""


class FormatError(DbsaError, ValueError):
    """On-disk artifact is corrupt or has the wrong format."""
