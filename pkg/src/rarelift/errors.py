"""Exception types shared across the library."""


class RareliftError(Exception):
    """Base class for library errors."""


class ConfigError(RareliftError):
    """Bad parameter value, malformed config, or unusable combination."""


class DataError(RareliftError):
    """Problem with input data: files, formats, value domains."""


class SchemaError(DataError):
    """Column names or kinds do not line up with what a consumer expects."""


class TrainingError(RareliftError):
    """Training diverged or could not proceed."""


class PipelineError(RareliftError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
