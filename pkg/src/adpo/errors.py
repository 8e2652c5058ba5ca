"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class ShapeError(ValueError):
    """Tensor shapes do not match the expected layout."""


class PreconditionError(ValueError):
    """An operation was called with inputs violating its precondition."""


class VocabularyError(KeyError):
    """A word or id is not part of the vocabulary."""


class CheckpointError(RuntimeError):
    """Malformed, truncated or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""
