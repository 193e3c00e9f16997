"""Exception types raised across the package."""


class SchemaError(ValueError):
    """Input columns or fields do not match the expected schema."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class DataQualityError(ValueError):
    """Too many rows failed validation during ingestion."""


class ConsistencyError(ValueError):
    """Feature schema, encoder state or model disagree with each other."""


class CorruptModelError(ValueError):
    """A model file failed to parse or its checksum does not match."""


class ModelVersionError(ValueError):
    """A model file declares a format version this code cannot read."""
