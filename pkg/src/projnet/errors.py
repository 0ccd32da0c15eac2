"""Exception hierarchy.

Every error raised by this package derives from ProjnetError so callers
can catch one thing. The CLI maps the three user-facing families to
distinct exit codes (config=2, data=3, model format=4).
"""


class ProjnetError(Exception):
    pass


class DimensionError(ProjnetError):
    """Operands have incompatible shapes; message reports both."""


class EmptyInputError(ProjnetError):
    """A sparse input with no stored entries has no direction to project."""


class ConfigError(ProjnetError):
    """Invalid configuration value or unparseable config file."""


class DataError(ProjnetError):
    """Dataset-level problem (bad label, malformed corpus, ...)."""


class IdxMagicError(DataError):
    """IDX file does not start with the expected big-endian magic."""


class IdxTruncatedError(DataError):
    """IDX payload is shorter than its header promises."""


class IdxCountMismatchError(DataError):
    """Image and label files disagree on the number of items."""


class ModelFormatError(ProjnetError):
    """Problem with the exported binary model format."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class LayerShapeError(ModelFormatError):
    """Serialized layer shapes are inconsistent with each other."""


class ForwardStateError(ProjnetError):
    """Backward pass requested before any forward pass cached its state."""


class TrainingDivergedError(ProjnetError):
    """Non-finite loss or gradient; message carries step and layer."""
