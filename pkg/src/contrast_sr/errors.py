"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A file on disk is not in the expected format."""


class DataError(ValueError):
    """Dataset content violates a pipeline precondition."""


class TrainingAborted(RuntimeError):
    """Training stopped because the loss became non-finite."""
